use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::{Graph, ParamSet};
use volalign_core::data::Volume;
use volalign_core::fusion::{AblationFlags, CsaNet, ModelConfig, Sample};
use volalign_core::objectives::{bce_loss, kl_alignment, kl_alignment_graph, lambda_c, lambda_s, total_loss, KlDirection, ScheduleState, BCE_EPS};
use volalign_core::text::TextEncoderConfig;
use volalign_core::vision::{prepare_input, VisionConfig};
use volalign_core::Error;

const E5: f64 = 6.737947e-4;
const MID: f64 = 8.208500e-3;

#[test]
fn schedule_boundaries_and_crossover() {
    for t_max in [2, 10, 40, 500] {
        let start = ScheduleState::new(0, t_max).unwrap();
        let end = ScheduleState::new(t_max, t_max).unwrap();
        let mid = ScheduleState::new(t_max / 2, t_max).unwrap();
        assert!((lambda_c(&start) - E5).abs() < 1e-9);
        assert!((lambda_s(&end) - E5).abs() < 1e-9);
        assert_eq!(lambda_c(&end), 0.1);
        assert_eq!(lambda_s(&start), 0.1);
        assert!((lambda_c(&mid) - MID).abs() < 1e-9);
        assert!((lambda_s(&mid) - MID).abs() < 1e-9);
    }
    assert!(matches!(ScheduleState::new(0, 0), Err(Error::Schedule { .. })));
    assert!(matches!(ScheduleState::new(5, 4), Err(Error::Schedule { .. })));
}

#[test]
fn total_loss_values() {
    let end = ScheduleState::new(8, 8).unwrap();
    assert_eq!(total_loss(0.0, 0.0, &end), 0.0);
    let (cls, kl) = (0.37, 1.9);
    assert!((total_loss(cls, kl, &end) - (0.1 * cls + E5 * kl)).abs() < 1e-12);
}

#[test]
fn bce_values() {
    assert!((bce_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 1.0]).unwrap() - 0.693147).abs() < 1e-6);
    assert!((bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap() - 0.164252).abs() < 1e-6);
    let perfect = bce_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
    assert!(perfect <= -(1.0 - BCE_EPS).ln() + 1e-15);
    assert!(bce_loss(&[f64::NAN], &[1.0]).is_err());
}

#[test]
fn kl_values() {
    let v = [0.3, -1.2, 2.0, 0.0];
    assert_eq!(kl_alignment(&v, &v, 1.0, KlDirection::Forward).unwrap(), 0.0);
    assert_eq!(kl_alignment(&v, &v, 1.0, KlDirection::Reverse).unwrap(), 0.0);
    // softmax([1, 0]) = [s, 1 - s] with s = sigmoid(1); q is its reverse
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    let (p, q) = ([s, 1.0 - s], [1.0 - s, s]);
    let brute: f64 = (0..2).map(|i| p[i] * (p[i] / q[i]).ln()).sum();
    assert!((brute - 0.462117).abs() < 1e-6);
    for dir in [KlDirection::Forward, KlDirection::Reverse] {
        assert!((kl_alignment(&[1.0, 0.0], &[0.0, 1.0], 1.0, dir).unwrap() - brute).abs() < 1e-12);
    }
    assert!(matches!(kl_alignment(&[1.0], &[1.0, 2.0], 1.0, KlDirection::Forward), Err(Error::Shape(_))));
}

#[test]
fn kl_is_non_negative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10_000 {
        let d = rng.gen_range(2..16);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        assert!(kl_alignment(&a, &b, 1.0, KlDirection::Forward).unwrap() >= 0.0);
        assert!(kl_alignment(&a, &b, 1.0, KlDirection::Reverse).unwrap() >= 0.0);
    }
    // one-element and nearly identical inputs sit right at the rounding floor
    for _ in 0..10_000 {
        let d = rng.gen_range(1..4);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-1e-9..1e-9)).collect();
        let t = rng.gen_range(0.1..3.0);
        assert!(kl_alignment(&a, &b, t, KlDirection::Forward).unwrap() >= 0.0);
        assert!(kl_alignment(&b, &a, t, KlDirection::Reverse).unwrap() >= 0.0);
    }
}

fn small_net(jitter: f64) -> (CsaNet, ParamSet<f64>, Sample) {
    let cfg = ModelConfig {
        vision: VisionConfig {
            conv_channels: [8, 8, 8, 8],
            swin_dim: 8,
            heads: 2,
            embed_dim: 8,
            ..VisionConfig::default()
        },
        text: TextEncoderConfig {
            dim: 12,
            ..TextEncoderConfig::default()
        },
        cct_heads: 2,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ps = ParamSet::new();
    let net = CsaNet::new(&mut ps, &cfg, AblationFlags::FULL, &["T1".to_string()], 3, &mut rng).unwrap();
    if jitter > 0.0 {
        let ids: Vec<_> = ps.entries().map(|(id, _)| id).collect();
        for id in ids {
            ps.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-jitter..jitter));
        }
    }
    let v = prepare_input(&Volume::from_fn([8; 3], |d, h, w| ((d + 2 * h + 3 * w) % 5) as f32 / 5.0)).unwrap();
    let sample = Sample {
        id: "s".into(),
        modality: "T1".into(),
        dims: v.dims(),
        volume: v.into_data(),
        text: (0..12).map(|i| (i as f32 * 1.3).cos()).collect(),
        labels: vec![1.0, 0.0, 0.0],
    };
    (net, ps, sample)
}

#[test]
fn total_gradient_is_the_weighted_sum() {
    let (net, ps, s) = small_net(0.05);
    let state = ScheduleState::new(2, 7).unwrap();
    let grads = |which: u8| {
        let mut g = Graph::new();
        let f = net.forward(&mut g, &ps, &s).unwrap();
        let target: Vec<f64> = g.value(f.projected_text.unwrap()).data().to_vec();
        let root = match which {
            0 => net.loss(&mut g, &f, &s.labels, &state).unwrap().total,
            1 => g.bce(f.probs, s.labels.iter().map(|&l| l as f64).collect(), BCE_EPS),
            _ => kl_alignment_graph(&mut g, &target, f.f_fusion, 1.0, KlDirection::Forward).unwrap(),
        };
        g.backward(root)
    };
    let (total, cls, kl) = (grads(0), grads(1), grads(2));
    let (lc, ls) = (lambda_c(&state), lambda_s(&state));
    let mut checked = 0;
    for (id, e) in ps.entries() {
        let zero = vec![0.0; e.tensor.len()];
        let get = |g: &volalign_autodiff::Gradients<f64>| g.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| zero.clone());
        let (t, c, k) = (get(&total), get(&cls), get(&kl));
        for i in 0..t.len() {
            let expected = lc * c[i] + ls * k[i];
            assert!((t[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{}[{i}]", e.name);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn alignment_gradient_never_reaches_the_text_side() {
    // With the zero-initialised gate the projector only influences the loss
    // through the alignment target, which must act as a constant.
    let (net, ps, s) = small_net(0.0);
    let state = ScheduleState::new(0, 5).unwrap();
    let mut g = Graph::new();
    let f = net.forward(&mut g, &ps, &s).unwrap();
    let loss = net.loss(&mut g, &f, &s.labels, &state).unwrap();
    assert!(loss.kl.unwrap() > 0.0);
    let grads = g.backward(loss.total);
    let mut saw_gate = false;
    for (id, e) in ps.entries() {
        let norm: f64 = grads.param(id).map_or(0.0, |t| t.data().iter().map(|v| v * v).sum());
        if e.name.starts_with("projector") {
            assert_eq!(norm, 0.0, "{}", e.name);
        }
        if e.name == "gate.weight" {
            saw_gate = norm > 0.0;
        }
    }
    assert!(saw_gate);
}

proptest! {
    #[test]
    fn ramps_are_monotone_bounded_and_mirrored(t_max in 1usize..600) {
        let mut prev: Option<(f64, f64)> = None;
        for t in 0..=t_max {
            let s = ScheduleState::new(t, t_max).unwrap();
            let m = ScheduleState::new(t_max - t, t_max).unwrap();
            let (c, l) = (lambda_c(&s), lambda_s(&s));
            prop_assert!(c > 0.0 && c <= 0.1 && l > 0.0 && l <= 0.1);
            prop_assert!((c - lambda_s(&m)).abs() < 1e-15);
            if let Some((pc, pl)) = prev {
                prop_assert!(c > pc && l < pl);
            }
            prev = Some((c, l));
        }
    }

    #[test]
    fn total_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, c1 in 0.0f64..3.0, k1 in 0.0f64..3.0, c2 in 0.0f64..3.0, k2 in 0.0f64..3.0, t in 0usize..=20) {
        let s = ScheduleState::new(t, 20).unwrap();
        let lhs = total_loss(a * c1 + b * c2, a * k1 + b * k2, &s);
        let rhs = a * total_loss(c1, k1, &s) + b * total_loss(c2, k2, &s);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bce_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 1..10), bits in any::<u16>()) {
        let y: Vec<f64> = (0..p.len()).map(|i| ((bits >> i) & 1) as f64).collect();
        prop_assert!(bce_loss(&p, &y).unwrap() >= 0.0);
    }
}

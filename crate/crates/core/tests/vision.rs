use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::{Graph, ParamSet, Tensor, Var};
use volalign_core::data::Volume;
use volalign_core::vision::{
    prepare_input, vision_encode, window_layout, ConvStream, Expert, GlobalPool, ModalityExpertBank, SwinBlock, TransformerStream, VisionConfig,
    TOTAL_STRIDE,
};
use volalign_core::Error;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(dims, |_, _, _| rng.gen::<f32>())
}

fn input(g: &mut Graph<f32>, v: &Volume) -> Var {
    g.constant(Tensor::new([1, v.len()], v.data().to_vec()).unwrap())
}

fn streams(cfg: &VisionConfig) -> (ParamSet<f32>, ConvStream, TransformerStream) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::new();
    let conv = ConvStream::new(&mut ps, "conv", "conv", &cfg.conv_channels, &mut rng).unwrap();
    let swin = TransformerStream::new(&mut ps, "swin", "swin", cfg, &mut rng).unwrap();
    (ps, conv, swin)
}

#[test]
fn conv_stream_shape_at_32() {
    let cfg = VisionConfig::default();
    let (ps, conv, _) = streams(&cfg);
    let mut g = Graph::inference();
    let x = input(&mut g, &random_volume([32; 3], 1));
    let (y, dims) = conv.forward(&mut g, &ps, x, [32; 3]);
    assert_eq!(dims, [2, 2, 2]);
    assert_eq!(g.value(y).dims2(), (64, 8));
    assert!(g.value(y).all_finite());
}

#[test]
fn zero_input_gives_zero_conv_output() {
    let cfg = VisionConfig::default();
    let (ps, conv, _) = streams(&cfg);
    let mut g = Graph::inference();
    let x = input(&mut g, &Volume::filled([32; 3], 0.0));
    let (y, _) = conv.forward(&mut g, &ps, x, [32; 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn streams_are_fusible_and_attention_is_row_stochastic() {
    let cfg = VisionConfig::default();
    let (ps, conv, swin) = streams(&cfg);
    for dims in [[32, 32, 32], [32, 64, 32]] {
        let v = random_volume(dims, 2);
        let mut g = Graph::inference();
        let x = input(&mut g, &v);
        let (c, cdims) = conv.forward(&mut g, &ps, x, dims);
        let out = swin.forward(&mut g, &ps, x, dims);
        assert_eq!(cdims, out.dims);
        assert_eq!(cdims, dims.map(|n| n / TOTAL_STRIDE));
        assert_eq!(g.value(c).dims2(), g.value(out.grid).dims2());
        assert_eq!(out.attention.len(), 4);
        for &a in &out.attention {
            let (layout, heads, probs) = g.attention_maps(a).unwrap();
            assert_eq!(probs.len(), layout.groups.len() * heads);
            for (pi, p) in probs.iter().enumerate() {
                let gk = layout.groups[pi / heads].keys.len();
                for row in p.chunks(gk) {
                    let s: f64 = row.iter().map(|&x| x as f64).sum();
                    assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
                }
            }
        }
    }
}

#[test]
fn swin_blocks_preserve_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::<f32>::new();
    let block = SwinBlock::new(&mut ps, "b", "swin", 16, 2, true, &mut rng).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_fn(vec![64, 16], |i| (i as f32 * 0.37).sin()));
    let (y, _) = block.forward(&mut g, &ps, x, Arc::new(window_layout([4, 4, 4], 2, true)), 4);
    assert_eq!(g.value(y).dims2(), (64, 16));
}

#[test]
fn padding_follows_stride() {
    let v = prepare_input(&random_volume([40, 33, 16], 4)).unwrap();
    assert_eq!(v.dims(), [48, 48, 16]);
    let small = prepare_input(&random_volume([3, 16, 16], 4));
    assert!(matches!(small, Err(Error::InputTooSmall { .. })));
}

#[test]
fn pooling_means_constant_channels() {
    let mut g = Graph::<f64>::inference();
    let grid = g.constant(Tensor::from_fn(vec![3, 8], |i| (i / 8) as f64 * 1.5 - 1.0));
    let m = GlobalPool::spatial_mean(&mut g, grid);
    assert_eq!(g.value(m).data(), &[-1.0, 0.5, 2.0]);
}

#[test]
fn experts_are_distinct_deterministic_and_checked() {
    let cfg = VisionConfig::default();
    let mods: Vec<String> = ["T1", "T2"].iter().map(|s| s.to_string()).collect();
    let bank = ModalityExpertBank::initialise(&mods, &cfg, 7).unwrap();
    let v = random_volume([32; 3], 5);
    let a = vision_encode(&v, "T1", &bank).unwrap();
    let b = vision_encode(&v, "T2", &bank).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, vision_encode(&v, "T1", &bank).unwrap());
    assert!(a.normalized);
    let norm = a.vector.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
    assert!(matches!(vision_encode(&v, "DWI", &bank), Err(Error::UnknownModality(m)) if m == "DWI"));
    assert_eq!(Expert::new("T1", &cfg, 7).unwrap().encode(&v).unwrap(), a);
}

proptest! {
    #[test]
    fn windows_partition_every_token_once(d in 1usize..7, h in 1usize..7, w in 1usize..7, shifted in any::<bool>()) {
        let layout = window_layout([d, h, w], 2, shifted);
        let mut count = vec![0usize; d * h * w];
        for grp in &layout.groups {
            prop_assert_eq!(&grp.queries, &grp.keys);
            for &q in &grp.queries {
                count[q] += 1;
            }
            if let Some(mask) = &grp.mask {
                let n = grp.keys.len();
                for i in 0..n {
                    prop_assert!(mask[i * n + i]);
                }
            }
        }
        prop_assert!(count.iter().all(|&c| c == 1));
    }

    #[test]
    fn pooling_is_unit_norm_and_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::<f64>::new();
        let pool = GlobalPool::new(&mut ps, "pool", "expert", 4, 6, &mut rng).unwrap();
        let data: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..8).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted: Vec<f64> = (0..4 * 8).map(|i| data[(i / 8) * 8 + perm[i % 8]]).collect();
        let embed = |d: Vec<f64>| {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::new([4, 8], d).unwrap());
            let y = pool.forward(&mut g, &ps, x);
            g.value(y).data().to_vec()
        };
        let (a, b) = (embed(data), embed(permuted));
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Gradient oracle shared by the core gradient tests and the acceptance suite.
//! Each block returns its norm-wise relative error against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::gradcheck::{param_central_diff, relative_error, spread_coords};
use volalign_autodiff::{Float, Graph, ParamSet, Tensor, Var};
use volalign_core::contrastive::symmetric_loss_graph;
use volalign_core::data::Volume;
use volalign_core::fusion::{modulate, AblationFlags, Cct, CsaNet, Gate, ModelConfig, Sample};
use volalign_core::nn::{Init, Linear};
use volalign_core::objectives::{kl_alignment_graph, lambda_c, lambda_s, KlDirection, ScheduleState, BCE_EPS};
use volalign_core::text::{TextEncoderConfig, TextProjector};
use volalign_core::vision::{prepare_input, window_layout, ConvStream, ExpertNet, SwinBlock, TransformerStream, VisionConfig};

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
const COORDS_PER_TENSOR: usize = 6;

pub trait Precision: Float {
    const EPS: f64;
}

impl Precision for f64 {
    const EPS: f64 = 1e-5;
}

impl Precision for f32 {
    const EPS: f64 = 6e-3;
}

fn random_tensor<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::from_f64_lossy(rng.gen_range(-scale..scale)))
}

/// Perturb every parameter away from its (often zero or one) initial
/// value so no gradient is trivially symmetric.
fn jitter<F: Float>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = ps.entries().map(|(id, _)| id).collect();
    for id in ids {
        for v in ps.tensor_mut(id).data_mut() {
            *v += F::from_f64_lossy(rng.gen_range(-scale..scale));
        }
    }
}

/// Norm-wise relative error between backprop and central differences of
/// `sum(probe * out)`, over sampled coordinates of every parameter in the
/// block, plus the tensor with the largest absolute discrepancy.
/// `scalar` marks outputs that are already the loss.
fn worst_error<F: Precision>(ps: &mut ParamSet<F>, scalar: bool, forward: impl Fn(&mut Graph<F>, &ParamSet<F>) -> Var) -> (f64, String) {
    let mut g = Graph::new();
    let out = forward(&mut g, ps);
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe: Vec<f64> = if scalar { vec![1.0] } else { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let probe_f: Vec<F> = probe.iter().map(|&p| F::from_f64_lossy(p)).collect();
    let s = g.dot_const(out, probe_f);
    let grads = g.backward(s);
    let eval = |ps: &ParamSet<F>| -> F {
        let mut g = Graph::inference();
        let out = forward(&mut g, ps);
        let v: f64 = g.value(out).data().iter().zip(&probe).map(|(o, p)| o.to_f64_lossy() * p).sum();
        F::from_f64_lossy(v)
    };
    let ids: Vec<_> = ps.entries().map(|(id, e)| (id, e.name.clone(), e.tensor.len())).collect();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut worst = (0.0, String::new());
    for (id, name, len) in ids {
        let coords = spread_coords(len, COORDS_PER_TENSOR);
        let analytic: Vec<f64> = match grads.param(id) {
            Some(t) => coords.iter().map(|&c| t.data()[c].to_f64_lossy()).collect(),
            None => vec![0.0; coords.len()],
        };
        let numeric: Vec<f64> = param_central_diff(ps, id, &coords, F::from_f64_lossy(F::EPS), &eval)
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let gap = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        if gap >= worst.0 {
            worst = (gap, name);
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    (relative_error(&all_a, &all_n), worst.1)
}

fn measure<F: Precision>(label: &str, ps: &mut ParamSet<F>, scalar: bool, forward: impl Fn(&mut Graph<F>, &ParamSet<F>) -> Var) -> f64 {
    let (err, name) = worst_error(ps, scalar, forward);
    let bits = 8 * std::mem::size_of::<F>();
    println!("{label} f{bits}: relative error {err:.3e} (largest gap in {name})");
    err
}

fn small_vision() -> VisionConfig {
    VisionConfig {
        conv_channels: [8, 8, 8, 8],
        swin_dim: 8,
        heads: 2,
        embed_dim: 8,
        ..VisionConfig::default()
    }
}

fn phantom_volume(n: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    Volume::from_fn([n; 3], |d, h, w| {
        let r = ((d as f64 - 2.5).powi(2) + (h as f64 - 4.0).powi(2) + (w as f64 - 5.0).powi(2)).sqrt();
        ((if r < 2.5 { 0.9 } else { 0.3 }) + rng.gen_range(-0.1..0.1)) as f32
    })
}

fn volume_var<F: Float>(g: &mut Graph<F>, v: &Volume) -> Var {
    g.constant(Tensor::new([1, v.len()], v.data().iter().map(|&x| F::from_f64_lossy(x as f64)).collect()).unwrap())
}

pub fn conv_stream<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::<F>::new();
    let conv = ConvStream::new(&mut ps, "conv", "conv", &small_vision().conv_channels, &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.1);
    let v = phantom_volume(8);
    measure("conv stream", &mut ps, false, |g, ps| {
        let x = volume_var(g, &v);
        conv.forward(g, ps, x, [8; 3]).0
    })
}

pub fn window_attention<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::<F>::new();
    let blocks = [
        SwinBlock::new(&mut ps, "b0", "swin", 8, 2, false, &mut rng).unwrap(),
        SwinBlock::new(&mut ps, "b1", "swin", 8, 2, true, &mut rng).unwrap(),
    ];
    jitter(&mut ps, &mut rng, 0.1);
    let dims = [4, 4, 2];
    let tokens: Tensor<F> = random_tensor(&mut rng, &[32, 8], 1.0);
    measure("window attention", &mut ps, false, |g, ps| {
        let mut x = g.constant(tokens.clone());
        for b in &blocks {
            let layout = std::sync::Arc::new(window_layout(dims, 2, b.shifted));
            x = b.forward(g, ps, x, layout, 2).0;
        }
        x
    })
}

pub fn transformer_stream<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::<F>::new();
    let stream = TransformerStream::new(&mut ps, "swin", "swin", &small_vision(), &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.1);
    let v = prepare_input(&phantom_volume(8)).unwrap();
    measure("transformer stream", &mut ps, false, |g, ps| {
        let x = volume_var(g, &v);
        stream.forward(g, ps, x, v.dims()).grid
    })
}

pub fn projector<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::<F>::new();
    let p = TextProjector::new(&mut ps, "projector", 12, 8, &mut rng).unwrap();
    let text: Tensor<F> = random_tensor(&mut rng, &[1, 12], 1.0);
    measure("projector", &mut ps, false, |g, ps| {
        let t = g.constant(text.clone());
        p.forward(g, ps, t).unwrap()
    })
}

pub fn gate<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::<F>::new();
    let p = TextProjector::new(&mut ps, "projector", 6, 4, &mut rng).unwrap();
    let gate = Gate::new(&mut ps, "gate", 4, 2, &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.5);
    let text: Tensor<F> = random_tensor(&mut rng, &[1, 6], 1.0);
    let grid: Tensor<F> = random_tensor(&mut rng, &[2, 8], 1.0);
    measure("gate", &mut ps, false, |g, ps| {
        let t = g.constant(text.clone());
        let pt = p.forward(g, ps, t).unwrap();
        let gv = gate.forward(g, ps, pt);
        let f = g.constant(grid.clone());
        modulate(g, f, gv)
    })
}

pub fn cct<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::<F>::new();
    let cct = Cct::new(&mut ps, "cct", 8, 8, 2, 2, &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.1);
    let a: Tensor<F> = random_tensor(&mut rng, &[8, 8], 1.0);
    let b: Tensor<F> = random_tensor(&mut rng, &[8, 8], 1.0);
    measure("cct", &mut ps, false, |g, ps| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        cct.forward(g, ps, a, b, [2, 2, 2]).0
    })
}

pub fn head_and_pool<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::<F>::new();
    let expert = ExpertNet::new(&mut ps, "", "expert", &small_vision(), &mut rng).unwrap();
    let head = Linear::new(&mut ps, "head", "head", 8, 3, Init::Scaled(8), &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.1);
    let v = phantom_volume(8);
    measure("pool + head", &mut ps, false, |g, ps| {
        let x = volume_var(g, &v);
        let e = expert.forward(g, ps, x, [8; 3]);
        head.forward(g, ps, e)
    })
}

pub fn contrastive_batch<F: Precision>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamSet::<F>::new();
    let expert = ExpertNet::new(&mut ps, "", "expert", &small_vision(), &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.1);
    let vols: Vec<Volume> = (0..3).map(|i| Volume::from_fn([8; 3], |d, h, w| ((d * 3 + h * i + w) % 7) as f32 / 7.0)).collect();
    let text: Tensor<F> = {
        let raw: Tensor<F> = random_tensor(&mut rng, &[3, 8], 1.0);
        let mut g = Graph::inference();
        let t = g.constant(raw);
        let n = g.l2_normalize_rows(t);
        g.value(n).clone()
    };
    measure("contrastive loss", &mut ps, true, |g, ps| {
        let rows: Vec<Var> = vols
            .iter()
            .map(|v| {
                let x = volume_var(g, v);
                expert.forward(g, ps, x, [8; 3])
            })
            .collect();
        let fv = g.stack_rows(&rows);
        let ft = g.constant(text.clone());
        symmetric_loss_graph(g, fv, ft, 0.07)
    })
}

pub fn end_to_end<F: Precision>() -> f64 {
    let cfg = ModelConfig {
        vision: small_vision(),
        text: TextEncoderConfig {
            dim: 8,
            ..TextEncoderConfig::default()
        },
        cct_heads: 2,
        ..ModelConfig::default()
    };
    let mods = vec!["T1".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::<F>::new();
    let net = CsaNet::new(&mut ps, &cfg, AblationFlags::FULL, &mods, 3, &mut rng).unwrap();
    jitter(&mut ps, &mut rng, 0.05);
    let v = prepare_input(&phantom_volume(8)).unwrap();
    let sample = Sample {
        id: "x".into(),
        modality: "T1".into(),
        dims: v.dims(),
        volume: v.data().to_vec(),
        text: (0..8).map(|i| (i as f32 * 0.7).sin()).collect(),
        labels: vec![0.0, 1.0, 0.0],
    };
    let schedule = ScheduleState::new(3, 6).unwrap();
    // The alignment target is a constant of the loss, so the oracle holds it
    // at its unperturbed value.
    let target: Vec<f64> = {
        let mut g = Graph::inference();
        let f = net.forward(&mut g, &ps, &sample).unwrap();
        g.value(f.projected_text.unwrap()).data().iter().map(|v| v.to_f64_lossy()).collect()
    };
    measure("end-to-end total loss", &mut ps, true, |g, ps| {
        let f = net.forward(g, ps, &sample).unwrap();
        let labels = sample.labels.iter().map(|&l| F::from_f64_lossy(l as f64)).collect();
        let bce = g.bce(f.probs, labels, F::from_f64_lossy(BCE_EPS));
        let bce = g.scale(bce, F::from_f64_lossy(lambda_c(&schedule)));
        let kl = kl_alignment_graph(g, &target, f.f_fusion, 1.0, KlDirection::Forward).unwrap();
        let kl = g.scale(kl, F::from_f64_lossy(lambda_s(&schedule)));
        g.add(bce, kl)
    })
}


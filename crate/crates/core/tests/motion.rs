use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ctxvc::context::{extract_features, generate_context, ContextConfig, ContextNet};
use ctxvc::contextual_codec::MotionMode;
use ctxvc::model::ModelConfig;
use ctxvc::motion::{estimate_flow, mv_decode, mv_encode, warp, FlowNet, MotionField, MvCodec};
use ctxvc::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smooth texture sampled at `(x + dx, y)`.
fn texture(w: usize, h: usize, dx: f64) -> Tensor {
    let mut v = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let xf = x as f64 + dx;
                let yf = y as f64;
                let p = c as f64 * 0.7;
                v.push(0.5 + 0.2 * (xf * 0.31 + p).sin() * (yf * 0.23).cos() + 0.15 * (xf * 0.11 - yf * 0.17 + p).sin());
            }
        }
    }
    Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap()
}

fn adam(store: &ParamStore, prefixes: &[&str], lr: f64) -> AdamW {
    let vars: Vec<Var> = store.vars_with_prefix(prefixes).into_iter().map(|(_, v)| v).collect();
    AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() }).unwrap()
}

fn interior_mean(flow: &Tensor, border: usize) -> (f64, f64) {
    let (_, _, h, w) = flow.dims4().unwrap();
    let inner = flow.narrow(2, border, h - 2 * border).unwrap().narrow(3, border, w - 2 * border).unwrap();
    let m: Vec<f32> = inner.mean((0, 2, 3)).unwrap().to_vec1().unwrap();
    (m[0] as f64, m[1] as f64)
}

#[test]
fn flow_overfits_known_translation() {
    let cfg = ModelConfig::tiny().motion;
    let mut store = ParamStore::new(5, DType::F32, Device::Cpu);
    let net = FlowNet::new(&mut store.root(), &cfg).unwrap();
    let reference = texture(64, 64, 0.0);
    // current(p) = reference(p + (2, 0)), so the backward flow is (2, 0).
    let current = texture(64, 64, 2.0);
    let mut opt = adam(&store, &["flow."], 2e-3);
    for _ in 0..500 {
        let flow = net.estimate(&reference, &current).unwrap();
        let warped = ctxvc::motion::warp_bilinear(&reference, &flow).unwrap();
        let loss = (warped - &current).unwrap().sqr().unwrap().mean_all().unwrap();
        opt.backward_step(&loss).unwrap();
    }
    let flow = estimate_flow(&net, &reference, &current).unwrap();
    let (dx, dy) = interior_mean(flow.tensor(), 8);
    assert!(((dx - 2.0).powi(2) + dy * dy).sqrt() < 0.5, "mean flow ({dx}, {dy})");
}

#[test]
fn flow_estimation_is_pure() {
    let mut store = ParamStore::new(6, DType::F32, Device::Cpu);
    let net = FlowNet::new(&mut store.root(), &ModelConfig::tiny().motion).unwrap();
    let (r, c) = (texture(64, 64, 0.0), texture(64, 64, 1.0));
    let a: Vec<f32> = net.estimate(&r, &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = net.estimate(&r, &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
}

#[test]
fn mv_codec_overfits_zero_motion() {
    let cfg = ModelConfig::tiny().motion;
    let mut store = ParamStore::new(7, DType::F32, Device::Cpu);
    let codec = MvCodec::new(&mut store.root(), &cfg).unwrap();
    let zero = MotionField::zeros(64, 64, DType::F32, &Device::Cpu).unwrap();
    let mut opt = adam(&store, &["mv_codec.", "mv_entropy."], 2e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let out = codec.forward_train(zero.tensor(), &mut rng).unwrap();
        let d = out.mv_hat.sqr().unwrap().mean_all().unwrap();
        let bits = ctxvc::entropy_model::bits_of(&out.latent.y_likelihood).unwrap();
        let loss = (d + (bits / (64.0 * 64.0 * 100.0)).unwrap()).unwrap();
        opt.backward_step(&loss).unwrap();
    }
    let block = mv_encode(&codec, &zero).unwrap();
    let (g, s) = codec.compress(&block).unwrap();
    let decoded = codec.decompress(&g, &s, 64, 64).unwrap();
    let a: Vec<f32> = block.g_hat.flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = decoded.g_hat.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
    let mv = mv_decode(&codec, &decoded).unwrap();
    assert!(mv.mean_abs().unwrap() <= 0.5, "mean |mv| {}", mv.mean_abs().unwrap());
}

#[test]
fn constant_flow_warp_shifts_interior() {
    let src = texture(32, 32, 0.0);
    let shifted = texture(32, 32, 3.0);
    let flow = MotionField::constant(32, 32, 3.0, 0.0, DType::F32, &Device::Cpu).unwrap();
    let out = warp(&src, &flow).unwrap();
    let diff = (out - shifted).unwrap().narrow(3, 0, 28).unwrap().abs().unwrap().max_all().unwrap();
    assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
}

fn correlation(a: &Tensor, b: &Tensor, border: usize) -> f64 {
    let crop = |t: &Tensor| -> Vec<f64> {
        let (_, _, h, w) = t.dims4().unwrap();
        t.narrow(2, border, h - 2 * border)
            .unwrap()
            .narrow(3, border, w - 2 * border)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    };
    let (x, y) = (crop(a), crop(b));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn warped_context_correlates_with_current_features() {
    let mut store = ParamStore::new(8, DType::F32, Device::Cpu);
    let net = ContextNet::new(&mut store.root(), &ContextConfig { context_dim: 16, refine_depth: 1 }).unwrap();
    let reference = texture(64, 64, 0.0);
    let current = texture(64, 64, 2.0);
    let truth = MotionField::constant(64, 64, 2.0, 0.0, DType::F32, &Device::Cpu).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let prefixes: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut opt = adam(&store, &prefixes, 1e-3);
    for _ in 0..100 {
        let target = extract_features(&net, &current).unwrap().detach();
        let ctx = generate_context(&net, &reference, &truth, MotionMode::Memc).unwrap();
        let loss = (ctx - target).unwrap().sqr().unwrap().mean_all().unwrap();
        opt.backward_step(&loss).unwrap();
    }
    let target = extract_features(&net, &current).unwrap();
    let warped = generate_context(&net, &reference, &truth, MotionMode::Memc).unwrap();
    let unwarped = generate_context(&net, &reference, &truth, MotionMode::None).unwrap();
    let (cw, cu) = (correlation(&warped, &target, 4), correlation(&unwarped, &target, 4));
    assert!(cw > cu, "warped {cw} vs unwarped {cu}");
}

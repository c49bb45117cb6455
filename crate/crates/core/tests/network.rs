use candle_core::{DType, Device, Tensor};
use gifnet::network::{load_checkpoint, save_checkpoint};
use gifnet::{ArchConfig, Branch, Gifnet, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ArchConfig {
    ArchConfig {
        base_channels: 4,
        enc_layers: 3,
        branch_layers: 4,
        embed_dim: 8,
        heads: 2,
        window: 4,
        mlp_ratio: 2.0,
    }
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn stream(cfg: &ArchConfig, seed: u64) -> Tensor {
    rand_tensor(seed, &[1, 8, 8, cfg.embed_dim])
}

#[test]
fn zero_encoder_weights_give_zero_features() {
    let cfg = ArchConfig::default();
    let p = ModelParams::init(&cfg, 1).unwrap();
    for name in p
        .names()
        .filter(|n| n.starts_with("senc."))
        .map(String::from)
        .collect::<Vec<_>>()
    {
        p.fill(&name, 0.0).unwrap();
    }
    let img = rand_tensor(2, &[1, 1, 16, 16]).abs().unwrap();
    let s = Gifnet::new(p.view()).sencoder(&img).unwrap();
    assert_eq!(s.dims(), &[1, 48, 16, 16]);
    assert!(to_vec(&s).iter().all(|v| *v == 0.0));
}

#[test]
fn encoder_output_has_expected_width() {
    let cfg = ArchConfig::default();
    let p = ModelParams::init(&cfg, 1).unwrap();
    let net = Gifnet::new(p.view());
    let gray = rand_tensor(3, &[2, 1, 8, 8]);
    let rgb = gray.repeat((1, 3, 1, 1)).unwrap();
    let a = net.sencoder(&gray).unwrap();
    assert_eq!(a.dims(), &[2, cfg.shared_channels(), 8, 8]);
    // gray inputs are replicated to three channels
    assert_eq!(to_vec(&a), to_vec(&net.sencoder(&rgb).unwrap()));
    assert!(net.sencoder(&rand_tensor(3, &[1, 2, 8, 8])).is_err());
}

#[test]
fn later_encoder_blocks_read_earlier_blocks() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 4).unwrap();
    let net = Gifnet::new(p.view());
    let img = rand_tensor(5, &[1, 1, 8, 8]);
    let full = net.sencoder_blocks(&img, None).unwrap();
    let ablated = net.sencoder_blocks(&img, Some(0)).unwrap();
    assert!(to_vec(&ablated[0]).iter().all(|v| *v == 0.0));
    for i in 1..cfg.enc_layers {
        assert!(
            max_abs_diff(&full[i], &ablated[i]) > 0.0,
            "block {i} ignores block 0"
        );
    }
    // ablating the last block leaves earlier ones untouched
    let tail = net.sencoder_blocks(&img, Some(cfg.enc_layers - 1)).unwrap();
    for i in 0..cfg.enc_layers - 1 {
        assert_eq!(to_vec(&full[i]), to_vec(&tail[i]));
    }
}

#[test]
fn zero_gate_equals_self_attention_path() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 6).unwrap();
    p.fill("mm.layer1.lambda", 0.0).unwrap();
    let net = Gifnet::new(p.view());
    let x_m = stream(&cfg, 7);
    let self_only = net.self_block(Branch::Mm, 1, &x_m).unwrap();
    for seed in [8, 9] {
        let out = net
            .cfgm_layer(Branch::Mm, &x_m, &stream(&cfg, seed), 1)
            .unwrap();
        assert_eq!(to_vec(&out), to_vec(&self_only));
    }
}

#[test]
fn even_layers_ignore_the_auxiliary_stream() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 10).unwrap();
    let net = Gifnet::new(p.view());
    let x_m = stream(&cfg, 11);
    let a = net
        .cfgm_layer(Branch::Dp, &x_m, &stream(&cfg, 12), 2)
        .unwrap();
    let b = net
        .cfgm_layer(Branch::Dp, &x_m, &stream(&cfg, 13), 2)
        .unwrap();
    assert_eq!(to_vec(&a), to_vec(&b));
    // odd layers with a nonzero gate do read it
    let c = net
        .cfgm_layer(Branch::Dp, &x_m, &stream(&cfg, 12), 3)
        .unwrap();
    let d = net
        .cfgm_layer(Branch::Dp, &x_m, &stream(&cfg, 13), 3)
        .unwrap();
    assert!(max_abs_diff(&c, &d) > 1e-4);
}

#[test]
fn layer_index_and_shape_are_checked() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 1).unwrap();
    let net = Gifnet::new(p.view());
    let x = stream(&cfg, 1);
    assert!(net.cfgm_layer(Branch::Mm, &x, &x, 0).is_err());
    assert!(net.cfgm_layer(Branch::Mm, &x, &x, 5).is_err());
    let other = rand_tensor(1, &[1, 8, 4, cfg.embed_dim]);
    assert!(net.cfgm_layer(Branch::Mm, &x, &other, 1).is_err());
}

/// Row-wise layer norm and affine map written directly over `Vec`s.
fn ln_linear(
    x: &[f32],
    c: usize,
    ln_w: &[f32],
    ln_b: &[f32],
    w: &[f32],
    b: &[f32],
    out: usize,
) -> Vec<f32> {
    let rows = x.len() / c;
    let mut y = vec![0f32; rows * out];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / c as f32;
        let norm: Vec<f32> = row
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * ln_w[i] + ln_b[i])
            .collect();
        for o in 0..out {
            y[r * out + o] = b[o] + (0..c).map(|i| w[o * c + i] * norm[i]).sum::<f32>();
        }
    }
    y
}

#[test]
fn uniform_query_cross_attention_averages_window_values() {
    let cfg = small();
    let e = cfg.embed_dim;
    let p = ModelParams::init(&cfg, 14).unwrap();
    let pre = "mm.layer1.cross";
    p.fill(&format!("{pre}.q.weight"), 0.0).unwrap();
    p.fill(&format!("{pre}.q.bias"), 0.0).unwrap();
    let eye = Tensor::eye(e, DType::F32, &Device::Cpu).unwrap();
    p.set(&format!("{pre}.out.weight"), &eye).unwrap();
    p.fill(&format!("{pre}.out.bias"), 0.0).unwrap();
    p.fill("mm.layer1.lambda", 0.5).unwrap();
    let net = Gifnet::new(p.view());
    let x_m = stream(&cfg, 15);
    let x_a = stream(&cfg, 16);
    let got = to_vec(&net.cfgm_layer(Branch::Mm, &x_m, &x_a, 1).unwrap());
    let x_hat = to_vec(&net.self_block(Branch::Mm, 1, &x_m).unwrap());

    let v = |n: &str| p.values(&format!("{pre}.{n}")).unwrap();
    let kv = ln_linear(
        &to_vec(&x_a),
        e,
        &v("norm_kv.weight"),
        &v("norm_kv.bias"),
        &v("kv.weight"),
        &v("kv.bias"),
        2 * e,
    );
    let (h, w, win) = (8, 8, cfg.window);
    for y in 0..h {
        for x in 0..w {
            let (wy, wx) = (y / win * win, x / win * win);
            for c in 0..e {
                let mut mean = 0.0;
                for yy in wy..wy + win {
                    for xx in wx..wx + win {
                        mean += kv[(yy * w + xx) * 2 * e + e + c];
                    }
                }
                mean /= (win * win) as f32;
                let i = (y * w + x) * e + c;
                let expect = x_hat[i] + 0.5 * mean;
                assert!(
                    (got[i] - expect).abs() < 1e-5,
                    "({y},{x},{c}): {} vs {expect}",
                    got[i]
                );
            }
        }
    }
}

#[test]
fn identical_branch_weights_give_identical_outputs() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 17).unwrap();
    let names: Vec<String> = p
        .names()
        .filter(|n| n.starts_with("mm."))
        .map(String::from)
        .collect();
    for n in names {
        p.set(&format!("dp.{}", &n[3..]), &p.tensor(&n).unwrap())
            .unwrap();
    }
    let net = Gifnet::new(p.view());
    let pair = rand_tensor(18, &[1, 2 * cfg.shared_channels(), 8, 8]);
    let mm = net.branch_forward(&pair, &pair, Branch::Mm).unwrap();
    let dp = net.branch_forward(&pair, &pair, Branch::Dp).unwrap();
    assert_eq!(to_vec(&mm), to_vec(&dp));
}

#[test]
fn two_layer_branch_has_one_interaction_site() {
    let cfg = ArchConfig {
        branch_layers: 2,
        ..small()
    };
    assert_eq!(cfg.cross_layers().collect::<Vec<_>>(), vec![1]);
    let p = ModelParams::init(&cfg, 19).unwrap();
    assert_eq!(
        p.lambda_names(Branch::Mm),
        vec!["mm.layer1.lambda".to_string()]
    );
    assert_eq!(p.lambda_names(Branch::Dp).len(), 1);
    let net = Gifnet::new(p.view());
    let pair = rand_tensor(20, &[1, 2 * cfg.shared_channels(), 8, 8]);
    let other = rand_tensor(21, &[1, 2 * cfg.shared_channels(), 8, 8]);
    let a = net.branch_forward(&pair, &pair, Branch::Mm).unwrap();
    let b = net.branch_forward(&pair, &other, Branch::Mm).unwrap();
    assert!(max_abs_diff(&a, &b) > 0.0);
    assert!(ArchConfig {
        branch_layers: 3,
        ..small()
    }
    .validate()
    .is_err());
}

#[test]
fn gate_response_is_linear_in_lambda() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 22).unwrap();
    let x_m = stream(&cfg, 23);
    let x_a = stream(&cfg, 24);
    let shift = |lambda: f64| {
        p.fill("dp.layer3.lambda", lambda).unwrap();
        let net = Gifnet::new(p.view());
        let with = net.cfgm_layer(Branch::Dp, &x_m, &x_a, 3).unwrap();
        let without = net.self_block(Branch::Dp, 3, &x_m).unwrap();
        to_vec(&(with - without).unwrap())
    };
    let d1 = shift(0.1);
    let d2 = shift(0.2);
    let n1: f32 = d1.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(n1 > 0.0);
    for (a, b) in d1.iter().zip(&d2) {
        assert!((2.0 * a - b).abs() < 1e-5 * (1.0 + b.abs()));
    }
}

#[test]
fn decoders_squash_into_unit_range() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 25).unwrap();
    let net = Gifnet::new(p.view());
    let feats = (rand_tensor(26, &[1, cfg.embed_dim, 8, 12]) * 50.0).unwrap();
    let shared = (rand_tensor(27, &[1, cfg.shared_channels(), 8, 12]) * 50.0).unwrap();
    for out in [net.gdec(&feats).unwrap(), net.rec(&shared).unwrap()] {
        assert_eq!(out.dims(), &[1, 1, 8, 12]);
        assert!(to_vec(&out).iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(net.gdec(&shared).is_err());
    for name in ["gdec.conv2.weight", "gdec.conv2.bias"] {
        p.fill(name, 0.0).unwrap();
    }
    let net = Gifnet::new(p.view());
    assert!(to_vec(&net.gdec(&feats).unwrap()).iter().all(|v| *v == 0.5));
}

#[test]
fn closed_gates_decouple_the_main_branch() {
    let cfg = ArchConfig::default();
    let p = ModelParams::init(&cfg, 28).unwrap();
    for n in p.lambda_names(Branch::Mm) {
        p.fill(&n, 0.0).unwrap();
    }
    let net = Gifnet::new(p.view());
    let pair = rand_tensor(29, &[1, 2 * cfg.shared_channels(), 16, 16]);
    let noisy = (&pair + (rand_tensor(30, pair.dims()) * 0.5).unwrap()).unwrap();
    let a = net.branch_forward(&pair, &pair, Branch::Mm).unwrap();
    let b = net.branch_forward(&pair, &noisy, Branch::Mm).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-6);
    // the DP branch, whose gates stay open, does see the perturbation
    let c = net.branch_forward(&pair, &pair, Branch::Dp).unwrap();
    let d = net.branch_forward(&pair, &noisy, Branch::Dp).unwrap();
    assert!(max_abs_diff(&c, &d) > 1e-4);
}

#[test]
fn forward_pair_requires_window_multiples() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 31).unwrap();
    let net = Gifnet::new(p.view());
    let a = rand_tensor(32, &[1, 1, 8, 8]).abs().unwrap();
    let out = net.forward_pair(&a, &a, Branch::Mm, true).unwrap();
    assert_eq!(out.fused.dims(), &[1, 1, 8, 8]);
    assert_eq!(out.reconstruction.unwrap().dims(), &[1, 1, 8, 8]);
    let odd = rand_tensor(33, &[1, 1, 8, 6]);
    assert!(net.forward_pair(&odd, &odd, Branch::Mm, false).is_err());
}

#[test]
fn checkpoint_file_roundtrip() {
    let cfg = small();
    let p = ModelParams::init(&cfg, 34).unwrap();
    p.fill("dp.layer3.lambda", 0.375).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gifn");
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path).unwrap();
    assert_eq!(q.config(), &cfg);
    assert!(p.bit_equal(&q).unwrap());
    assert!(load_checkpoint(dir.path().join("missing.gifn")).is_err());
}

#[test]
fn initialization_is_seeded() {
    let cfg = small();
    let a = ModelParams::init(&cfg, 35).unwrap();
    let b = ModelParams::init(&cfg, 35).unwrap();
    let c = ModelParams::init(&cfg, 36).unwrap();
    assert!(a.bit_equal(&b).unwrap());
    assert!(!a.bit_equal(&c).unwrap());
    assert!(a.lambdas(Branch::Mm).unwrap().iter().all(|l| *l == 0.1));
}

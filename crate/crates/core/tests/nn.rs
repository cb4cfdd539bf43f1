use proptest::prelude::*;
use voxdiff::nn::gradcheck::{op_suite, unet_spot_check};
use voxdiff::nn::{sinusoidal_embedding, Binder, Checkpoint, Graph, Tensor, UNet, UNetConfig, Variant};
use voxdiff::rng::{self, Purpose};

fn small_cfg(variant: Variant) -> UNetConfig {
    UNetConfig {
        resolution: 8,
        width: 8,
        levels: 2,
        res_blocks: 1,
        variant,
        ..UNetConfig::default()
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Purpose::Test, 99);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, n)).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, report) in op_suite(3).unwrap() {
        assert!(report.checked > 0, "{name}: nothing compared");
        assert!(report.max_rel_err <= 1e-5, "{name}: rel err {}", report.max_rel_err);
    }
}

#[test]
fn unet_parameter_gradients_match_finite_differences() {
    let cfg = UNetConfig {
        res_blocks: 2,
        attention_resolutions: vec![2],
        ..small_cfg(Variant::Single)
    };
    let report = unet_spot_check(&cfg, 20, 11).unwrap();
    assert_eq!(report.checked, 20);
    assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn raw_embeddings_are_pairwise_distinct() {
    let embs: Vec<Vec<f64>> = (0..=1000).map(|i| sinusoidal_embedding(i, 8).unwrap()).collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-9, "steps {i} and {j} collide");
        }
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let x0 = random_tensor(&[1, 2, 4, 4, 4], 1);
    let w0 = random_tensor(&[2, 2, 3, 3, 3], 2);
    let b0 = random_tensor(&[2], 3);
    let c1 = random_tensor(&[1, 2, 4, 4, 4], 4).into_data();
    let c2 = random_tensor(&[1, 2, 4, 4, 4], 5).into_data();
    let grad_of = |a: f64, b: f64| {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.variable(w0.clone());
        let bias = g.constant(b0.clone());
        let y = g.conv3d(x, w, bias).unwrap();
        let y = g.silu(y);
        let f = g.dot_const(y, &c1).unwrap();
        let h = g.dot_const(y, &c2).unwrap();
        let fa = g.scale(f, a);
        let hb = g.scale(h, b);
        let l = g.add(fa, hb).unwrap();
        g.backward(l).unwrap().get(w).into_data()
    };
    let gf = grad_of(1.0, 0.0);
    let gh = grad_of(0.0, 1.0);
    let combo = grad_of(2.5, -0.75);
    for i in 0..gf.len() {
        let expect = 2.5 * gf[i] - 0.75 * gh[i];
        assert!((combo[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn repeated_backward_is_identical() {
    let net = UNet::new(small_cfg(Variant::Single)).unwrap();
    let params = net.init(5).unwrap();
    let x = random_tensor(&[2, 4, 8, 8, 8], 6);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut b = Binder::new(&params, true);
        let y = net.forward(&mut g, &mut b, xv, &[1, 9]).unwrap();
        let l = g.weighted_sse(y, &vec![0.5; x.numel()], &vec![1.0; x.numel()]).unwrap();
        let mut grads = g.backward(l).unwrap();
        b.gradients(&mut grads).flatten()
    };
    assert_eq!(run(), run());
}

#[test]
fn double_variant_shapes_and_dataflow() {
    let net = UNet::new(small_cfg(Variant::Double)).unwrap();
    let params = net.init(8).unwrap();
    assert!(params.names().any(|n| n.starts_with("density.")));
    assert!(params.names().any(|n| n.starts_with("color.")));
    let d = random_tensor(&[1, 1, 8, 8, 8], 1);
    let c = random_tensor(&[1, 3, 8, 8, 8], 2);
    let eval = |d: &Tensor| {
        let mut g = Graph::new();
        let dv = g.constant(d.clone());
        let cv = g.constant(c.clone());
        let mut b = Binder::new(&params, false);
        let (dh, ch) = net.forward_double(&mut g, &mut b, dv, cv, &[4]).unwrap();
        assert_eq!(g.shape(dh), &[1, 1, 8, 8, 8]);
        assert_eq!(g.shape(ch), &[1, 3, 8, 8, 8]);
        g.value(ch).clone()
    };
    // Zero-initialized density head outputs a constant, so Ĉ must not see d_t.
    let mut permuted = d.clone();
    permuted.data_mut().reverse();
    assert_eq!(eval(&d), eval(&permuted));
}

#[test]
fn double_variant_gradients_reach_both_networks() {
    let net = UNet::new(small_cfg(Variant::Double)).unwrap();
    let mut params = net.init(8).unwrap();
    let mut r = rng::stream(1, Purpose::Test, 5);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng::normal(&mut r);
        }
    }
    let x = random_tensor(&[1, 4, 8, 8, 8], 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut b = Binder::new(&params, true);
    let y = net.forward(&mut g, &mut b, xv, &[2]).unwrap();
    let l = g.weighted_sse(y, &vec![0.0; x.numel()], &vec![1.0; x.numel()]).unwrap();
    let mut grads = g.backward(l).unwrap();
    let gp = b.gradients(&mut grads);
    for prefix in ["density.", "color."] {
        let norm: f64 = gp.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.sq_norm()).sum();
        assert!(norm > 0.0, "{prefix} received no gradient");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let net = UNet::new(small_cfg(Variant::Single)).unwrap();
    let mut params = net.init(2).unwrap();
    let mut r = rng::stream(2, Purpose::Test, 5);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng::normal(&mut r);
        }
    }
    let mut ck = Checkpoint::new(net.config().clone(), params.clone());
    ck.step = 17;
    ck.meta = serde_json::json!({"note": "x"});
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vxck");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    let x = random_tensor(&[1, 4, 8, 8, 8], 9);
    let a = net.predict(&params, &x, &[3]).unwrap();
    let b = UNet::new(back.config.clone()).unwrap().predict(back.params().unwrap(), &x, &[3]).unwrap();
    assert_eq!(a, b);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..10], &path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn unet_preserves_shape_and_finiteness(seed in 0u64..1000, step in 0usize..1000, scale in 0.1f64..10.0) {
        let net = UNet::new(UNetConfig { resolution: 4, width: 4, levels: 1, res_blocks: 1, ..UNetConfig::default() }).unwrap();
        let mut params = net.init(seed).unwrap();
        let mut r = rng::stream(seed, Purpose::Test, 7);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng::normal(&mut r);
            }
        }
        let x = Tensor::new(vec![2, 4, 4, 4, 4], rng::normal_vec(&mut r, 512).iter().map(|v| v * scale).collect()).unwrap();
        let y = net.predict(&params, &x, &[step, 0]).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }
}

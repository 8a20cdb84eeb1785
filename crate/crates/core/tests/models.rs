use dgan::autograd::Graph;
use dgan::models::{
    Binding, DiscriminatorSpec, EncoderSpec, GeneratorSpec, HeadSpec, Layer, Mode, ParamKind, ParamSet, LATENT_DIM,
    PROJ_REAL, SCORE,
};
use dgan::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn tiny_disc(batch_norm: bool) -> DiscriminatorSpec {
    DiscriminatorSpec {
        encoder: EncoderSpec {
            base_channels: 2,
            feature_dim: 6,
            batch_norm,
            ..Default::default()
        },
        proj_dim: 4,
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn parameter_counts_are_golden() {
    // Frozen from a hand count of the layer lists.
    let gen = GeneratorSpec::default().init::<f32>(0).unwrap();
    assert_eq!(gen.trainable_count(), 1_068_931);
    let disc = DiscriminatorSpec {
        encoder: EncoderSpec::default(),
        proj_dim: 128,
    };
    let enc = disc.encoder.init::<f32>(0).unwrap();
    assert_eq!(enc.trainable_count(), 2_756_544);
    assert_eq!(disc.init::<f32>(0).unwrap().trainable_count(), 3_676_353);
    let mut bn = disc.clone();
    bn.encoder.batch_norm = true;
    assert_eq!(bn.init::<f32>(0).unwrap().trainable_count(), 3_676_737);
    let small = GeneratorSpec {
        base_channels: 32,
        ..Default::default()
    };
    assert_eq!(small.init::<f32>(0).unwrap().trainable_count(), 370_627);
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let spec = GeneratorSpec {
        base_channels: 4,
        ..Default::default()
    };
    let a = spec.init::<f32>(5).unwrap();
    let b = spec.init::<f32>(5).unwrap();
    let c = spec.init::<f32>(6).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn generator_spec_rejects_wrong_stage_count_and_latent() {
    let mut spec = GeneratorSpec::default();
    spec.num_upsample_stages = 2;
    assert!(spec.validate().is_err());
    let mut spec = GeneratorSpec::default();
    spec.latent_dim = 64;
    assert!(spec.validate().is_err());
}

#[test]
fn generator_output_contract() {
    let spec = GeneratorSpec {
        base_channels: 8,
        ..Default::default()
    };
    let ps = spec.init::<f32>(1).unwrap();
    let z = gaussian(&[16, LATENT_DIM], 2, 1.0).cast::<f32>();
    let run = |z: &Tensor<f32>| {
        let g = Graph::new();
        let b = Binding::new(&g, &ps, false);
        let zv = g.constant(z.clone());
        let y = spec.forward(&b, zv, Mode::Eval, &mut Vec::new()).unwrap();
        let out = g.value(y).clone();
        out
    };
    let y = run(&z);
    assert_eq!(y.shape(), &[16, 3, 32, 32]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(run(&z).data(), y.data());
    let big = z.map(|v| v * 1e4);
    assert!(run(&big).max_abs() <= 1.0);
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let spec = GeneratorSpec {
        base_channels: 2,
        ..Default::default()
    };
    let ps = spec.init::<f64>(3).unwrap();
    let z = gaussian(&[3, LATENT_DIM], 4, 1.0);
    let f = |z: &Tensor<f64>| -> f64 {
        let g = Graph::new();
        let b = Binding::new(&g, &ps, false);
        let zv = g.constant(z.clone());
        let y = spec.forward(&b, zv, Mode::Train, &mut Vec::new()).unwrap();
        let m = g.mean(y);
        g.item(m)
    };
    let g = Graph::new();
    let b = Binding::new(&g, &ps, true);
    let zv = g.param(z.clone());
    let y = spec.forward(&b, zv, Mode::Train, &mut Vec::new()).unwrap();
    let m = g.mean(y);
    let grads = g.backward(m).unwrap();
    let gz = grads.get(zv).unwrap();
    let h = 1e-3;
    for idx in [0, 17, 99, 150, 299] {
        let mut zp = z.clone();
        zp.data_mut()[idx] += h;
        let mut zm = z.clone();
        zm.data_mut()[idx] -= h;
        let fd = (f(&zp) - f(&zm)) / (2.0 * h);
        assert!(rel_close(fd, gz.data()[idx], 1e-3), "z[{idx}] fd {fd} vs {}", gz.data()[idx]);
    }
    // A few parameter coordinates as well.
    let name = "gen.deconv1.weight";
    let wv = b.var(name).unwrap();
    let gw = grads.get(wv).unwrap();
    for idx in [0, 5, 40] {
        let eval = |delta: f64| {
            let mut p = ps.clone();
            p.get_mut(name).unwrap().value.data_mut()[idx] += delta;
            let g = Graph::new();
            let b = Binding::new(&g, &p, false);
            let zv = g.constant(z.clone());
            let y = spec.forward(&b, zv, Mode::Train, &mut Vec::new()).unwrap();
            let m = g.mean(y);
            g.item(m)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_close(fd, gw.data()[idx], 1e-3), "w[{idx}] fd {fd} vs {}", gw.data()[idx]);
    }
}

#[test]
fn encoder_shape_permutation_and_zero_input() {
    let spec = tiny_disc(true);
    let mut ps = spec.init::<f64>(7).unwrap();
    // Non-trivial running statistics.
    for (name, p) in ps.iter_mut() {
        if name.ends_with("running_var") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
    }
    let x = gaussian(&[8, 3, 32, 32], 8, 0.5);
    let enc = |x: &Tensor<f64>| {
        let g = Graph::new();
        let b = Binding::new(&g, &ps, false);
        let xv = g.constant(x.clone());
        let h = spec.encode(&b, xv, Mode::Eval, &mut Vec::new()).unwrap();
        let out = g.value(h).clone();
        out
    };
    let h = enc(&x);
    assert_eq!(h.shape(), &[8, 6]);
    let perm = [3, 0, 7, 1, 6, 2, 5, 4];
    let hp = enc(&x.select_outer(&perm));
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(hp.row(i), h.row(p));
    }
    assert!(enc(&Tensor::zeros(&[8, 3, 32, 32])).all_finite());

    let g = Graph::new();
    let b = Binding::new(&g, &ps, false);
    let bad = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
    assert!(matches!(spec.encode(&b, bad, Mode::Eval, &mut Vec::new()), Err(Error::Shape(_))));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    for batch_norm in [false, true] {
        let spec = tiny_disc(batch_norm);
        let ps = spec.init::<f64>(9).unwrap();
        let x = gaussian(&[3, 3, 32, 32], 10, 0.5);
        let weights = gaussian(&[3, 6], 11, 1.0);
        let objective = |g: &Graph<f64>, h| {
            let w = g.constant(weights.clone().reshape(&[18, 1]).unwrap());
            let flat = g.reshape(h, &[1, 18]).unwrap();
            let s = g.linear(flat, g.reshape(w, &[1, 18]).unwrap(), None).unwrap();
            g.mean(s)
        };
        let f = |x: &Tensor<f64>, p: &ParamSet<f64>| {
            let g = Graph::new();
            let b = Binding::new(&g, p, false);
            let xv = g.constant(x.clone());
            let h = spec.encode(&b, xv, Mode::Train, &mut Vec::new()).unwrap();
            let o = objective(&g, h);
            g.item(o)
        };
        let g = Graph::new();
        let b = Binding::new(&g, &ps, true);
        let xv = g.param(x.clone());
        let h = spec.encode(&b, xv, Mode::Train, &mut Vec::new()).unwrap();
        let o = objective(&g, h);
        let grads = g.backward(o).unwrap();
        let gx = grads.get(xv).unwrap();
        let hstep = 1e-5;
        for idx in [0, 1000, 2047, 3071] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += hstep;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= hstep;
            let fd = (f(&xp, &ps) - f(&xm, &ps)) / (2.0 * hstep);
            assert!(rel_close(fd, gx.data()[idx], 1e-3), "bn={batch_norm} x[{idx}] fd {fd} vs {}", gx.data()[idx]);
        }
        for name in ["enc.conv0.weight", "enc.conv2.weight", "enc.fc.weight", "enc.fc.bias"] {
            let gw = grads.get(b.var(name).unwrap()).unwrap();
            for idx in [0, 5] {
                let mut pp = ps.clone();
                pp.get_mut(name).unwrap().value.data_mut()[idx] += hstep;
                let mut pm = ps.clone();
                pm.get_mut(name).unwrap().value.data_mut()[idx] -= hstep;
                let fd = (f(&x, &pp) - f(&x, &pm)) / (2.0 * hstep);
                assert!(rel_close(fd, gw.data()[idx], 1e-3), "{name}[{idx}] fd {fd} vs {}", gw.data()[idx]);
            }
        }
    }
}

#[test]
fn projection_rows_are_unit_norm_and_deterministic() {
    let spec = DiscriminatorSpec {
        encoder: EncoderSpec {
            base_channels: 2,
            feature_dim: 32,
            ..Default::default()
        },
        proj_dim: 16,
    };
    let ps = spec.init::<f32>(12).unwrap();
    let feats = gaussian(&[10, 32], 13, 3.0).cast::<f32>();
    let run = || {
        let g = Graph::new();
        let b = Binding::new(&g, &ps, false);
        let h = g.constant(feats.clone());
        let z = spec.project_real(&b, h).unwrap();
        let out = g.value(z).clone();
        out
    };
    let z = run();
    assert_eq!(z.shape(), &[10, 16]);
    for i in 0..10 {
        let n: f32 = z.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5);
    }
    assert_eq!(run().data(), z.data());
}

#[test]
fn projection_of_exactly_zero_preactivation_is_first_basis_vector() {
    let head = HeadSpec::projection(4, 3);
    let mut ps = head.init::<f64>(PROJ_REAL, 0);
    for (_, p) in ps.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let g = Graph::new();
    let b = Binding::new(&g, &ps, true);
    let h = g.param(Tensor::zeros(&[2, 4]));
    let z = head.forward(&b, PROJ_REAL, h).unwrap();
    assert_eq!(g.value(z).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let m = g.mean(z);
    let grads = g.backward(m).unwrap();
    assert!(grads.get(h).map_or(true, |t| t.all_finite()));
}

#[test]
fn score_head_contract_and_gradient() {
    let spec = tiny_disc(false);
    let ps = spec.init::<f64>(14).unwrap();
    let mut feats = gaussian(&[8, 6], 15, 1.0);
    let dup = feats.row(2).to_vec();
    feats.data_mut()[5 * 6..6 * 6].copy_from_slice(&dup);
    let g = Graph::new();
    let b = Binding::new(&g, &ps, false);
    let h = g.param(feats.clone());
    let s = spec.score_real_fake(&b, h).unwrap();
    let scores = g.value(s).clone();
    assert_eq!(scores.shape(), &[8]);
    assert!(scores.all_finite());
    assert_eq!(scores.data()[2], scores.data()[5]);
    let m = g.mean(s);
    let grad = g.backward(m).unwrap().get(h).unwrap().clone();
    let f = |x: &Tensor<f64>| {
        let g = Graph::new();
        let b = Binding::new(&g, &ps, false);
        let h = g.constant(x.clone());
        let s = spec.score_real_fake(&b, h).unwrap();
        let m = g.mean(s);
        g.item(m)
    };
    let hstep = 1e-5;
    for idx in 0..feats.numel() {
        let mut p = feats.clone();
        p.data_mut()[idx] += hstep;
        let mut q = feats.clone();
        q.data_mut()[idx] -= hstep;
        let fd = (f(&p) - f(&q)) / (2.0 * hstep);
        assert!(rel_close(fd, grad.data()[idx], 1e-3), "h[{idx}] fd {fd} vs {}", grad.data()[idx]);
    }
}

#[test]
fn layer_lists_are_structural() {
    let spec = EncoderSpec::default();
    let convs = spec
        .layers()
        .iter()
        .filter(|l| matches!(l, Layer::Conv { stride: 2, .. }))
        .count();
    assert_eq!(convs, 3);
    assert_eq!(spec.prunable(), vec!["enc.conv0.weight", "enc.conv1.weight", "enc.conv2.weight", "enc.fc.weight"]);
    let heads = HeadSpec::score(8).layers(SCORE);
    assert!(!heads.contains(&Layer::RowNormalize));
    let gen = GeneratorSpec::default().layers();
    assert_eq!(gen.last(), Some(&Layer::Tanh));
    assert_eq!(gen.iter().filter(|l| matches!(l, Layer::BatchNorm { .. })).count(), 3);
    assert!(ParamKind::NormScale.trainable() && !ParamKind::RunningVar.trainable());
}

use dgan::data::synthetic::synthetic_cifar10;
use dgan::data::LabeledImageSet;
use dgan::models::{DiscriminatorSpec, EncoderSpec, GeneratorSpec};
use dgan::prune::{DamageConfig, PruneMask};
use dgan::trainer::checkpoint;
use dgan::trainer::run::{read_losses, train, BatchStream, RunDir};
use dgan::trainer::{sample, BatchKey, TrainConfig, TrainState, Trainer, Variant};
use dgan::{Error, Scalar, Tensor};

fn small_config(variant: Variant, total_steps: u64, batch_size: usize) -> TrainConfig {
    let json = serde_json::json!({
        "variant": variant,
        "dataset": "full",
        "total_steps": total_steps,
        "batch_size": batch_size,
        "seed": 11,
        "damage": DamageConfig::default(),
        "eval": {"n_gen": 40, "splits": 2},
    });
    let mut cfg = TrainConfig::from_json(&json.to_string()).unwrap();
    cfg.generator = GeneratorSpec {
        base_channels: 16,
        ..GeneratorSpec::default()
    };
    cfg.discriminator = Some(DiscriminatorSpec {
        encoder: EncoderSpec {
            base_channels: 16,
            feature_dim: 64,
            batch_norm: variant == Variant::Dcgan,
            ..EncoderSpec::default()
        },
        proj_dim: 32,
    });
    cfg.validate().unwrap();
    cfg
}

fn batch_of<T: Scalar>(data: &LabeledImageSet, stream: &mut BatchStream, counter: u64) -> (Tensor<T>, BatchKey) {
    let key = stream.key(counter);
    (data.batch::<T>(stream.indices(key)), key)
}

fn ones_mask<T: Scalar>(tr: &Trainer<T>, st: &TrainState<T>) -> PruneMask {
    PruneMask::all_ones(&st.disc, &tr.prunable).unwrap()
}

#[test]
fn identical_state_and_batch_give_identical_checksums() {
    let data = synthetic_cifar10(2, 0).unwrap();
    for v in Variant::ALL {
        let cfg = small_config(v, 1, 8);
        let tr = Trainer::<f32>::new(&cfg).unwrap();
        let mut a = tr.init_state().unwrap();
        tr.refresh_mask(&mut a, 0).unwrap();
        let mut b = a.clone();
        let mut stream = BatchStream::new(cfg.seed, data.len(), 8).unwrap();
        let batch = batch_of::<f32>(&data, &mut stream, 0);
        let la = tr.train_step(&mut a, std::slice::from_ref(&batch)).unwrap();
        let lb = tr.train_step(&mut b, std::slice::from_ref(&batch)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.gen.checksum(), b.gen.checksum());
        assert_eq!(a.disc.checksum(), b.disc.checksum());
    }
}

#[test]
fn damage_with_all_ones_mask_reduces_to_contrad() {
    let data = synthetic_cifar10(4, 3).unwrap();
    let con = Trainer::<f64>::new(&small_config(Variant::Contrad, 10, 8)).unwrap();
    let dam = Trainer::<f64>::new(&small_config(Variant::Damage, 10, 8)).unwrap();
    let mut sc = con.init_state().unwrap();
    let mut sd = dam.init_state().unwrap();
    assert_eq!(sc.disc.checksum(), sd.disc.checksum());
    let mut stream = BatchStream::new(11, data.len(), 8).unwrap();
    for step in 0..10 {
        sd.mask = Some(ones_mask(&dam, &sd));
        let batch = batch_of::<f64>(&data, &mut stream, step);
        let lc = con.train_step(&mut sc, std::slice::from_ref(&batch)).unwrap();
        let ld = dam.train_step(&mut sd, std::slice::from_ref(&batch)).unwrap();
        assert_eq!(lc.values.len(), ld.values.len());
        for ((nc, vc), (nd, vd)) in lc.values.iter().zip(&ld.values) {
            assert_eq!(nc, nd);
            assert!((vc - vd).abs() <= 1e-6, "step {} {nc}: {vc} vs {vd}", step + 1);
        }
    }
}

#[test]
fn half_steps_touch_only_their_own_side() {
    let data = synthetic_cifar10(2, 0).unwrap();
    for v in Variant::ALL {
        let cfg = small_config(v, 1, 8);
        let tr = Trainer::<f32>::new(&cfg).unwrap();
        let mut st = tr.init_state().unwrap();
        tr.refresh_mask(&mut st, 0).unwrap();
        let mut stream = BatchStream::new(cfg.seed, data.len(), 8).unwrap();
        let (real, key) = batch_of::<f32>(&data, &mut stream, 0);

        let gen_before = st.gen.checksum();
        let disc_before = st.disc.checksum();
        let gen_t = st.gen_opt.t;
        tr.d_step(&mut st, &real, key, 0).unwrap();
        assert_eq!(st.gen.checksum(), gen_before, "{v:?}: discriminator update moved the generator");
        assert_eq!(st.gen_opt.t, gen_t);
        assert_ne!(st.disc.checksum(), disc_before);

        let disc_mid = st.disc.checksum();
        let disc_t = st.disc_opt.t;
        tr.g_step(&mut st, key).unwrap();
        assert_eq!(st.disc.checksum(), disc_mid, "{v:?}: generator update moved the discriminator");
        assert_eq!(st.disc_opt.t, disc_t);
        assert_ne!(st.gen.checksum(), gen_before);
    }
}

#[test]
fn two_hundred_steps_on_eight_images_stay_finite() {
    let data = synthetic_cifar10(1, 5).unwrap().select(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    for v in Variant::ALL {
        let cfg = small_config(v, 200, 8);
        let tr = Trainer::<f32>::new(&cfg).unwrap();
        let mut st = tr.init_state().unwrap();
        let mut stream = BatchStream::new(cfg.seed, data.len(), 8).unwrap();
        for step in 0..200 {
            let batch = batch_of::<f32>(&data, &mut stream, step);
            if st.mask.is_none() || batch.1.epoch != st.epoch {
                tr.refresh_mask(&mut st, batch.1.epoch).unwrap();
            }
            st.epoch = batch.1.epoch;
            let l = tr.train_step(&mut st, &[batch]).unwrap();
            assert!(l.values.iter().all(|(_, x)| x.is_finite()), "{v:?} step {}: {l:?}", step + 1);
        }
        assert_eq!(st.step, 200);
    }
}

#[test]
fn several_discriminator_updates_per_step() {
    let data = synthetic_cifar10(4, 0).unwrap();
    let mut cfg = small_config(Variant::Contrad, 1, 8);
    cfg.d_steps_per_g_step = 2;
    let tr = Trainer::<f32>::new(&cfg).unwrap();
    let mut st = tr.init_state().unwrap();
    let mut stream = BatchStream::new(cfg.seed, data.len(), 8).unwrap();
    let one = batch_of::<f32>(&data, &mut stream, 0);
    assert!(matches!(tr.train_step(&mut st.clone(), std::slice::from_ref(&one)), Err(Error::Contract(_))));
    let two = batch_of::<f32>(&data, &mut stream, 1);
    tr.train_step(&mut st, &[one, two]).unwrap();
    assert_eq!(st.disc_opt.t, 2);
    assert_eq!(st.gen_opt.t, 1);
}

#[test]
fn undersized_batch_is_rejected() {
    let data = synthetic_cifar10(1, 0).unwrap();
    let cfg = small_config(Variant::Dcgan, 1, 8);
    let tr = Trainer::<f32>::new(&cfg).unwrap();
    let mut st = tr.init_state().unwrap();
    let key = BatchKey { epoch: 0, batch_index: 0 };
    let r = tr.train_step(&mut st, &[(data.batch::<f32>(&[0, 1, 2, 3]), key)]);
    assert!(matches!(r, Err(Error::InsufficientBatch(_))));
    assert!(matches!(BatchStream::new(0, 5, 8), Err(Error::InsufficientBatch(_))));
}

#[test]
fn non_finite_state_reports_divergence() {
    let data = synthetic_cifar10(1, 0).unwrap();
    for v in Variant::ALL {
        let cfg = small_config(v, 1, 8);
        let tr = Trainer::<f32>::new(&cfg).unwrap();
        let mut st = tr.init_state().unwrap();
        tr.refresh_mask(&mut st, 0).unwrap();
        let name = st.disc.iter().map(|(n, _)| n.clone()).next().unwrap();
        let mut disc = st.disc.clone();
        for (n, p) in disc.iter_mut() {
            if *n == name {
                p.value = p.value.map(|_| f32::NAN);
            }
        }
        st.disc = disc;
        let key = BatchKey { epoch: 0, batch_index: 0 };
        match tr.train_step(&mut st, &[(data.batch::<f32>(&[0, 1, 2, 3, 4, 5, 6, 7]), key)]) {
            Err(Error::Diverged { step, loss }) => {
                assert_eq!(step, 1);
                assert!(!loss.is_empty());
            }
            other => panic!("{v:?}: expected divergence, got {other:?}"),
        }
    }
}

#[test]
fn sampling_shape_determinism_and_chunking() {
    let spec = GeneratorSpec {
        base_channels: 16,
        ..GeneratorSpec::default()
    };
    let params = spec.init::<f32>(4).unwrap();
    assert_eq!(sample(&spec, &params, 1, 0, 16).unwrap().shape(), &[1, 3, 32, 32]);
    let a = sample(&spec, &params, 64, 9, 16).unwrap();
    let b = sample(&spec, &params, 64, 9, 16).unwrap();
    assert_eq!(a, b);
    let one_shot = sample(&spec, &params, 64, 9, 64).unwrap();
    assert_eq!(a, one_shot);
    assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    assert_ne!(a, sample(&spec, &params, 64, 10, 16).unwrap());
    assert!(sample(&spec, &params, 0, 0, 16).is_err());
}

#[test]
fn checkpoint_roundtrip_keeps_state_and_mask() {
    let data = synthetic_cifar10(2, 0).unwrap();
    let cfg = small_config(Variant::Damage, 2, 8);
    let tr = Trainer::<f32>::new(&cfg).unwrap();
    let mut st = tr.init_state().unwrap();
    tr.refresh_mask(&mut st, 0).unwrap();
    let mut stream = BatchStream::new(cfg.seed, data.len(), 8).unwrap();
    for c in 0..2 {
        let b = batch_of::<f32>(&data, &mut stream, c);
        tr.train_step(&mut st, &[b]).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    checkpoint::save(&st, &cfg, &path).unwrap();
    let (back, meta) = checkpoint::load(&path, &tr).unwrap();
    assert_eq!(back, st);
    assert_eq!(meta.step, 2);
    assert_eq!(meta.config, cfg);
    let (gen, _) = checkpoint::load_generator::<f32>(&path).unwrap();
    assert_eq!(gen, st.gen);
    let (disc, _) = checkpoint::load_discriminator::<f32>(&path).unwrap();
    assert_eq!(disc, st.disc);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&path, bytes).unwrap();
    assert!(checkpoint::load(&path, &tr).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = synthetic_cifar10(3, 2).unwrap();
    let full_cfg = small_config(Variant::Damage, 7, 8);
    let mut short_cfg = full_cfg.clone();
    short_cfg.total_steps = 3;

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (RunDir::new(a.path()), RunDir::new(b.path()));
    train::<f32>(&full_cfg, &data, &ra, false, &mut |_, _| Ok(())).unwrap();
    train::<f32>(&short_cfg, &data, &rb, false, &mut |_, _| Ok(())).unwrap();
    let out = train::<f32>(&full_cfg, &data, &rb, true, &mut |_, _| Ok(())).unwrap();
    assert_eq!(out.final_step, 7);
    assert!(!out.already_complete);

    let ma = checkpoint::read_meta(&ra.checkpoint(7)).unwrap();
    let mb = checkpoint::read_meta(&rb.checkpoint(7)).unwrap();
    assert_eq!(ma.gen_sha256, mb.gen_sha256);
    assert_eq!(ma.disc_sha256, mb.disc_sha256);
    assert_eq!(ma.mask_epoch, mb.mask_epoch);
    assert_eq!(read_losses(&ra.losses()).unwrap(), read_losses(&rb.losses()).unwrap());

    let again = train::<f32>(&full_cfg, &data, &rb, true, &mut |_, _| Ok(())).unwrap();
    assert!(again.already_complete);
    assert!(matches!(train::<f32>(&full_cfg, &data, &ra, false, &mut |_, _| Ok(())), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let data = synthetic_cifar10(2, 0).unwrap();
    let cfg = small_config(Variant::Contrad, 4, 8);
    let logs: Vec<_> = (0..2)
        .map(|_| {
            let d = tempfile::tempdir().unwrap();
            let r = RunDir::new(d.path());
            train::<f32>(&cfg, &data, &r, false, &mut |_, _| Ok(())).unwrap();
            std::fs::read(r.losses()).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert!(!logs[0].is_empty());
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let data = synthetic_cifar10(1, 0).unwrap();
    let cfg = small_config(Variant::Dcgan, 0, 8);
    let d = tempfile::tempdir().unwrap();
    let r = RunDir::new(d.path());
    let mut calls = 0;
    let out = train::<f32>(&cfg, &data, &r, false, &mut |_, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.final_step, 0);
    assert_eq!(r.checkpoint_steps().unwrap(), vec![0]);
    assert!(read_losses(&r.losses()).unwrap().is_empty());
    assert_eq!(calls, 0);
    assert_eq!(TrainConfig::load(&r.config()).unwrap(), cfg);
}

#[test]
fn checkpoint_and_eval_cadence() {
    let data = synthetic_cifar10(2, 0).unwrap();
    let mut cfg = small_config(Variant::Dcgan, 5, 8);
    cfg.checkpoint_every = 2;
    cfg.eval_every = 2;
    let d = tempfile::tempdir().unwrap();
    let r = RunDir::new(d.path());
    let mut seen = Vec::new();
    train::<f32>(&cfg, &data, &r, false, &mut |_, st| {
        seen.push(st.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(r.checkpoint_steps().unwrap(), vec![0, 2, 4, 5]);
    assert_eq!(seen, vec![0, 2, 4, 5]);
    let losses = read_losses(&r.losses()).unwrap();
    assert_eq!(losses.len(), 5 * 2);
    assert_eq!(losses[0].name, "d_bce");
}

#[test]
fn run_lock_is_exclusive() {
    let d = tempfile::tempdir().unwrap();
    let r = RunDir::new(d.path());
    let guard = r.lock().unwrap();
    assert!(r.lock().is_err());
    drop(guard);
    assert!(!r.lock_path().exists());
    r.lock().unwrap();
}

#[test]
fn config_errors_name_the_problem() {
    let err = TrainConfig::from_json(r#"{"dataset": "full", "total_steps": 1, "batch_size": 8}"#).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("variant")), "{err}");
    let err = TrainConfig::from_json(r#"{"variant": "damage", "dataset": "full", "total_steps": 1, "batch_size": 8}"#).unwrap_err();
    assert!(err.to_string().contains("damage"));
    let err = TrainConfig::from_json(r#"{"variant": "dcgan", "dataset": "full", "total_steps": 1, "batch_size": 2}"#).unwrap_err();
    assert!(err.to_string().contains("batch_size"));
    let err = TrainConfig::from_json(r#"{"variant": "gan", "dataset": "full", "total_steps": 1, "batch_size": 8}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = TrainConfig::from_json(r#"{"variant": "dcgan", "dataset": "full", "total_steps": 1, "batch_size": 8, "lr": 1}"#).unwrap_err();
    assert!(err.to_string().contains("lr"));
}

#[test]
fn config_json_roundtrip() {
    let cfg = small_config(Variant::Damage, 3, 16);
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

use geoaware::backbones::GeoStub;
use geoaware::deskworld::{generate_dataset, make_tasks, seen_cameras, Dataset};
use geoaware::numerics::Graph;
use geoaware::policy::{mlp_head, HeadKind, Policy, PolicyConfig, PolicySpec};
use geoaware::training::*;
use geoaware::Error;
use sha2::{Digest, Sha256};

fn small_spec(head: HeadKind) -> PolicySpec {
    let policy = PolicyConfig {
        d_repr: 16,
        d_conv: 8,
        d_hidden: 16,
        d_lang_emb: 8,
        trunk_layers: 1,
        trunk_heads: 2,
        head,
        ..PolicyConfig::default()
    };
    PolicySpec::for_tasks(policy, Default::default(), &make_tasks())
}

fn dataset(per_task: usize) -> Dataset {
    generate_dataset(&make_tasks(), per_task, 3).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        vq_pretrain_steps: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn batch_of_64_has_one_seven_wide_target_per_sample() {
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Mlp);
    let policy = Policy::<f32>::new(spec.clone(), 0).unwrap();
    let pool = all_indices(&ds);
    let idx: Vec<_> = (0..64).map(|i| pool[(i * 7) % pool.len()]).collect();
    let b = make_batch::<f32>(&ds, &idx, &policy.featurizer().unwrap(), &spec.vocab, 1, &seen_cameras()).unwrap();
    assert_eq!(b.targets.shape(), &[64, 7]);
    assert_eq!(b.mask.len(), 64 * 7);
    assert_eq!(b.obs.batch(), 64);
}

#[test]
fn same_indices_give_identical_batch_bytes() {
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Mlp);
    let f = Policy::<f32>::new(spec.clone(), 0).unwrap().featurizer().unwrap();
    let pool = all_indices(&ds);
    let mut r1 = geoaware::seed::rng(5, "t", &[]);
    let mut r2 = geoaware::seed::rng(5, "t", &[]);
    let i1 = sample_indices(&pool, 16, &mut r1);
    let i2 = sample_indices(&pool, 16, &mut r2);
    assert_eq!(i1, i2);
    let a = make_batch::<f32>(&ds, &i1, &f, &spec.vocab, 2, &seen_cameras()).unwrap();
    let b = make_batch::<f32>(&ds, &i2, &f, &spec.vocab, 2, &seen_cameras()).unwrap();
    assert_eq!(a.obs.to_bytes(), b.obs.to_bytes());
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.mask, b.mask);
}

#[test]
fn chunk_past_the_episode_end_is_zero_padded_and_masked() {
    let ds = dataset(1);
    let n = ds.episodes[0].len();
    let (t, mask) = action_chunks::<f64>(&ds, &[(0, n - 2)], 4).unwrap();
    let per_action: Vec<f64> = mask.chunks(7).map(|c| c[0]).collect();
    assert_eq!(per_action, vec![1.0, 1.0, 0.0, 0.0]);
    assert!(mask.chunks(7).all(|c| c.iter().all(|&m| m == c[0])));
    assert!(t.data()[14..].iter().all(|&v| v == 0.0));
    let last = ds.episodes[0].steps[n - 1].action.to_array();
    assert_eq!(&t.data()[7..14], &last[..]);
}

#[test]
fn out_of_range_index_is_rejected() {
    let ds = dataset(1);
    let n = ds.episodes[0].len();
    assert!(matches!(action_chunks::<f32>(&ds, &[(0, n)], 1), Err(Error::Input(_))));
    assert!(matches!(action_chunks::<f32>(&ds, &[(99, 0)], 1), Err(Error::Input(_))));
}

#[test]
fn zero_learning_rate_leaves_trainable_parameters_unchanged() {
    // decoupled decay scales by 1 − lr·λ, which is exactly 1 at lr = 0
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Mlp);
    let cfg = TrainConfig {
        lr: 0.0,
        weight_decay: 0.5,
        ..quick(5)
    };
    let out = bc_train(&ds, spec.clone(), &cfg).unwrap();
    let init = Policy::<f32>::new(spec, geoaware::seed::derive(cfg.seed, "init", &[])).unwrap();
    for name in out.policy.params.trainable_names() {
        assert_eq!(out.policy.params.get(name).unwrap().data(), init.params.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn decay_alone_shrinks_by_the_decoupled_factor() {
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Mlp);
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 100.0,
        ..quick(1)
    };
    let out = bc_train(&ds, spec.clone(), &cfg).unwrap();
    let init = Policy::<f32>::new(spec, geoaware::seed::derive(cfg.seed, "init", &[])).unwrap();
    // Adam's first step moves each entry by at most lr, so the decayed value
    // 0.9·w must be within lr of the trained one
    for name in out.policy.params.trainable_names() {
        let a = out.policy.params.get(name).unwrap().data();
        let w = init.params.get(name).unwrap().data();
        for (x, w0) in a.iter().zip(w) {
            assert!((x - 0.9 * w0).abs() <= 1.001e-3, "{name}: {x} vs {w0}");
        }
    }
}

#[test]
fn mlp_geo_policy_overfits_one_episode() {
    let tasks = make_tasks();
    let ds = generate_dataset(&tasks[..1], 1, 11).unwrap();
    let spec = PolicySpec::for_tasks(PolicyConfig::default(), Default::default(), &tasks);
    let cfg = TrainConfig {
        steps: 2000,
        ..TrainConfig::default()
    };
    let out = bc_train(&ds, spec, &cfg).unwrap();
    let mse = episode_mse(&out.policy, &ds);
    assert!(mse <= 1e-3, "training MSE {mse}");
}

/// Masked MSE over every step of the dataset, in the standardized action
/// space the loss is computed in.
fn episode_mse(policy: &Policy<f32>, ds: &Dataset) -> f64 {
    let pool = all_indices(ds);
    let chunk = policy.config().chunk;
    let b = make_batch::<f32>(ds, &pool, &policy.featurizer().unwrap(), &policy.spec.vocab, chunk, &seen_cameras())
        .unwrap();
    let mut g = Graph::new();
    let h = policy.hidden(&mut g, &b.obs).unwrap();
    let pred = mlp_head(&mut g, &policy.params, h).unwrap();
    let t = g.constant(policy.normalize_actions(&b.targets).unwrap());
    let l = g.weighted_mse(pred, t, Some(&b.mask)).unwrap();
    g.value(l).item() as f64
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn same_seed_gives_identical_checkpoint_and_loss_curve() {
    let ds = dataset(1);
    for head in [HeadKind::Mlp, HeadKind::Vqbet] {
        let cfg = quick(20);
        let a = bc_train(&ds, small_spec(head), &cfg).unwrap();
        let b = bc_train(&ds, small_spec(head), &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.codebook_losses, b.codebook_losses);
        let ha = digest(&checkpoint_bytes(&a.policy, &cfg, 20).unwrap());
        let hb = digest(&checkpoint_bytes(&b.policy, &cfg, 20).unwrap());
        assert_eq!(ha, hb);
        let c = bc_train(&ds, small_spec(head), &TrainConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a.losses, c.losses);
    }
}

#[test]
fn frozen_backbone_and_language_table_survive_training() {
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Mlp);
    let stub_before = GeoStub::new(&spec.geo).unwrap().lift_hash();
    let lang_before = Policy::<f32>::new(spec.clone(), 0).unwrap().language_table_hash();
    let out = bc_train(&ds, spec.clone(), &quick(30)).unwrap();
    assert_eq!(out.policy.language_table_hash(), lang_before);
    let stub_after = out.policy.featurizer().unwrap().stub().unwrap().lift_hash();
    assert_eq!(stub_after, stub_before);
}

#[test]
fn codebook_is_constant_through_the_head_phase() {
    let ds = dataset(1);
    let spec = small_spec(HeadKind::Vqbet);
    let short = bc_train(&ds, spec.clone(), &quick(1)).unwrap();
    let long = bc_train(&ds, spec, &quick(40)).unwrap();
    let vq = |p: &Policy<f32>| p.params.hash_where(|n| n.starts_with("vq."));
    assert_eq!(vq(&short.policy), vq(&long.policy));
    assert!(long.policy.params.iter().filter(|(n, _)| n.starts_with("vq.")).all(|(n, _)| long.policy.params.is_frozen(n)));
    assert_ne!(
        short.policy.params.hash_where(|n| n.starts_with("head.")),
        long.policy.params.hash_where(|n| n.starts_with("head."))
    );
}

#[test]
fn non_finite_loss_aborts_with_step_and_norms() {
    let mut ds = dataset(1);
    ds.episodes[0].steps[0].action.d_pos[0] = f64::NAN;
    let err = bc_train(&ds, small_spec(HeadKind::Mlp), &quick(5)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Numeric(_)), "{msg}");
    assert!(msg.contains("step 0") && msg.contains("norms"), "{msg}");
}

#[test]
fn invalid_train_config_is_rejected() {
    let ds = dataset(1);
    for cfg in [TrainConfig { steps: 0, ..quick(1) }, TrainConfig { batch_size: 0, ..quick(1) }] {
        assert!(matches!(bc_train(&ds, small_spec(HeadKind::Mlp), &cfg), Err(Error::Config(_))));
    }
}

fn trained(head: HeadKind) -> (Policy<f32>, TrainConfig) {
    let cfg = quick(3);
    (bc_train(&dataset(1), small_spec(head), &cfg).unwrap().policy, cfg)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for head in [HeadKind::Mlp, HeadKind::Vqbet] {
        let (policy, cfg) = trained(head);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gavp");
        save_checkpoint(&policy, &cfg, 3, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 3);
        assert_eq!(ck.meta.train, cfg);
        assert_eq!(ck.policy.spec, policy.spec);
        assert_eq!(ck.policy.codebook_trained, policy.codebook_trained);
        for (name, t) in policy.params.iter() {
            let u = ck.policy.params.get(name).unwrap();
            assert_eq!(u.shape(), t.shape());
            let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(u.data()), bits(t.data()), "{name}");
            assert_eq!(ck.policy.params.is_frozen(name), policy.params.is_frozen(name), "{name}");
        }
        assert_eq!(checkpoint_bytes(&ck.policy, &ck.meta.train, ck.step).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn truncated_or_corrupt_checkpoint_is_a_format_error() {
    let (policy, cfg) = trained(HeadKind::Mlp);
    let bytes = checkpoint_bytes(&policy, &cfg, 3).unwrap();
    let cuts = [0, 3, 4, 8, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1];
    for cut in cuts {
        assert!(matches!(parse_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(parse_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(parse_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = bytes;
    bad.push(0);
    assert!(matches!(parse_checkpoint(&bad), Err(Error::Format(_))));
}

#[test]
fn failed_save_leaves_no_partial_file() {
    let (policy, cfg) = trained(HeadKind::Mlp);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("p.gavp");
    assert!(save_checkpoint(&policy, &cfg, 3, &path).is_err());
    assert!(!path.exists());
}

#[test]
fn checkpoint_under_a_different_config_is_rejected() {
    let (policy, cfg) = trained(HeadKind::Mlp);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.gavp");
    save_checkpoint(&policy, &cfg, 3, &path).unwrap();
    let mut other = policy.spec.clone();
    other.policy.d_repr += 1;
    assert!(matches!(load_checkpoint_expecting(&path, &other), Err(Error::Config(_))));
    assert!(load_checkpoint_expecting(&path, &policy.spec).is_ok());
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::deskworld::{
    make_tasks, render_image, reset, sample_viewpoints, seen_cameras, CameraPose, SceneState, ViewCategory,
};
use crate::error::Error;
use crate::numerics::{grad_check_params, probe_loss, GradCheckOptions, Graph, ParamStore, Tensor};

fn scene(seed: u64) -> SceneState {
    let tasks = make_tasks();
    reset(&tasks[seed as usize % tasks.len()], seed).unwrap()
}

fn camera_suite() -> Vec<CameraPose> {
    let mut cams = seen_cameras().to_vec();
    for (i, cat) in [ViewCategory::NovelSmall, ViewCategory::NovelMedium, ViewCategory::NovelLarge]
        .into_iter()
        .enumerate()
    {
        cams.extend(sample_viewpoints(cat, 2, 40 + i as u64).unwrap().cameras.into_iter().take(if i == 2 { 2 } else { 1 }));
    }
    cams
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn alpha_schedule_runs_from_zero_to_one() {
    let cfg = GeoStubConfig::default();
    assert_eq!(cfg.alpha(1), 0.0);
    assert_eq!(cfg.alpha(cfg.layers), 1.0);
    for l in 2..=cfg.layers {
        assert!(cfg.alpha(l) >= cfg.alpha(l - 1));
    }
}

#[test]
fn deepest_layer_is_camera_invariant() {
    let stub = GeoStub::new(&GeoStubConfig::default()).unwrap();
    let cams = camera_suite();
    assert_eq!(cams.len(), 6);
    for seed in 0..10 {
        let s = scene(seed);
        let base = stub.features(&s, &cams[0], 0).unwrap();
        for cam in &cams[1..] {
            let f = stub.features(&s, cam, 1).unwrap();
            assert!(max_diff(&base.layers[11], &f.layers[11]) <= 1e-9);
        }
    }
}

#[test]
fn first_layer_depends_on_camera() {
    let stub = GeoStub::new(&GeoStubConfig::default()).unwrap();
    let [a, b] = seen_cameras();
    for seed in 0..10 {
        let s = scene(seed);
        let fa = stub.features(&s, &a, 0).unwrap();
        let fb = stub.features(&s, &b, 1).unwrap();
        assert!(max_diff(&fa.layers[0], &fb.layers[0]) > 1e-3);
    }
}

#[test]
fn features_are_bitwise_deterministic_and_padded() {
    let cfg = GeoStubConfig::default();
    let stub = GeoStub::new(&cfg).unwrap();
    let s = scene(3);
    let cam = &seen_cameras()[1];
    let f = stub.features(&s, cam, 0).unwrap();
    assert_eq!(f, GeoStub::new(&cfg).unwrap().features(&s, cam, 0).unwrap());
    assert_eq!(f.num_layers(), 12);
    // 1 ee + 3 objects + 2 regions + 4 fiducials, the rest zero
    for layer in &f.layers {
        for c in 0..cfg.width {
            assert!(layer[c * 16 + 10..(c + 1) * 16].iter().all(|&v| v == 0.0));
        }
    }
    let t = f.layer_tensor::<f32>(4).unwrap();
    assert_eq!(t.shape(), &[32, 16]);
    assert!(!t.requires_grad);
    assert!(f.layer_tensor::<f32>(13).is_err());
}

#[test]
fn subset_matches_full_pyramid() {
    let stub = GeoStub::new(&GeoStubConfig::default()).unwrap();
    let s = scene(8);
    let cam = &seen_cameras()[0];
    let full = stub.features(&s, cam, 0).unwrap();
    let sub = stub.features_for(&s, cam, 0, &[2, 4, 7, 9]).unwrap();
    for (k, l) in [2, 4, 7, 9].into_iter().enumerate() {
        assert_eq!(sub.layers[k], full.layers[l - 1]);
    }
    assert!(stub.features_for(&s, cam, 0, &[0]).is_err());
}

#[test]
fn keypoint_behind_camera_gets_flag_zero_and_clamped_depth() {
    // layer 1 is the pure view part, so the ee token is lift · (0, 0, 1e-3, 0, ...)
    let cfg = GeoStubConfig::default();
    let stub = GeoStub::new(&cfg).unwrap();
    let mut s = scene(1);
    let cam = seen_cameras()[0].clone();
    s.ee_pos = [0.0, 0.0, 1.5]; // above the top-down camera
    let f = stub.features(&s, &cam, 0).unwrap();
    let lift = &stub_lift(&stub, 1);
    let ee: Vec<f64> = (0..cfg.width).map(|c| f.layers[0][c * 16]).collect();
    let expect: Vec<f64> = (0..cfg.width).map(|c| lift[c * RAW_WIDTH + 2] * 1e-3).collect();
    assert!(max_diff(&ee, &expect) < 1e-15);
}

fn stub_lift(stub: &GeoStub, l: usize) -> Vec<f64> {
    // rebuilt from the seed independently of the stub
    use rand_distr::{Distribution, StandardNormal};
    let cfg = stub.config();
    let mut rng = crate::seed::rng(cfg.lift_seed, "geo-lift", &[(l - 1) as u64]);
    (0..cfg.width * RAW_WIDTH)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (RAW_WIDTH as f64).sqrt()
        })
        .collect()
}

#[test]
fn too_many_keypoints_is_a_config_error() {
    let cfg = GeoStubConfig {
        keypoints: 8,
        ..GeoStubConfig::default()
    };
    let stub = GeoStub::new(&cfg).unwrap();
    let r = stub.features(&scene(0), &seen_cameras()[0], 0);
    assert!(matches!(r, Err(Error::Config(_))));
    assert!(GeoStub::new(&GeoStubConfig {
        layers: 1,
        ..GeoStubConfig::default()
    })
    .is_err());
}

#[test]
fn lift_hash_depends_only_on_seed() {
    let a = GeoStub::new(&GeoStubConfig::default()).unwrap();
    let b = GeoStub::new(&GeoStubConfig::default()).unwrap();
    let c = GeoStub::new(&GeoStubConfig {
        lift_seed: 99,
        ..GeoStubConfig::default()
    })
    .unwrap();
    assert_eq!(a.lift_hash(), b.lift_hash());
    assert_ne!(a.lift_hash(), c.lift_hash());
}

#[test]
fn layer_selection_modes() {
    assert_eq!(LayerSelection::Even(4).indices(12).unwrap(), vec![2, 4, 7, 9]);
    assert_eq!(LayerSelection::All.indices(12).unwrap().len(), 12);
    assert_eq!(LayerSelection::Last(4).indices(12).unwrap(), vec![9, 10, 11, 12]);
    assert_eq!(LayerSelection::Last(1).indices(12).unwrap(), vec![12]);
    assert!(matches!(LayerSelection::Even(13).indices(12), Err(Error::Config(_))));
    assert!(LayerSelection::Last(0).indices(12).is_err());
    for s in ["all", "even4", "last4", "even(2)"] {
        let sel: LayerSelection = s.parse().unwrap();
        assert_eq!(sel.to_string().parse::<LayerSelection>().unwrap(), sel);
    }
    assert!("first3".parse::<LayerSelection>().is_err());
    assert_eq!(serde_json::to_string(&LayerSelection::Even(4)).unwrap(), "\"even4\"");
}

proptest! {
    #[test]
    fn even_selection_is_strictly_increasing_within_range(m in 1usize..=24, l in 1usize..=24) {
        prop_assume!(l <= m);
        let idx = LayerSelection::Even(l).indices(m).unwrap();
        prop_assert_eq!(idx.len(), l);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx[0] >= 1 && *idx.last().unwrap() <= m);
    }
}

fn pixel_store(rng_seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    init_pixel_encoder(&mut store, "pix", 5, 6, &mut rng).unwrap();
    store
}

fn small_image(seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn film_identity_matches_unconditioned_path() {
    let mut store = pixel_store(1);
    for name in ["pix.film_gamma.w", "pix.film_gamma.b", "pix.film_beta.w", "pix.film_beta.b"] {
        store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let img = small_image(2);
    let lang = Tensor::from_fn(&[2, 5], |i| i as f64 * 0.3 - 1.0);
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let l = g.constant(lang);
    let y = pixel_features(&mut g, &store, "pix", x, l).unwrap();

    // same network without FiLM
    let mut h = g.constant(img);
    for i in 0..3 {
        let w = g.param(&store, &format!("pix.conv{i}.w")).unwrap();
        let b = g.param(&store, &format!("pix.conv{i}.b")).unwrap();
        h = g.conv2d(h, w, b, 2, 1).unwrap();
        h = g.relu(h);
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[2, 32, s[2] * s[3]]).unwrap();
    let p = g.adaptive_avg_pool1d(flat, 1).unwrap();
    let p = g.reshape(p, &[2, 32]).unwrap();
    let z = crate::nn::mlp2(&mut g, &store, "pix.head", p).unwrap();
    assert_eq!(g.value(y).data(), g.value(z).data());
    assert_eq!(g.shape(y), &[2, 6]);
}

#[test]
fn pixel_features_gradients_match_finite_differences() {
    let store = pixel_store(3);
    let img = small_image(4);
    let lang = Tensor::from_fn(&[2, 5], |i| (i as f64 * 0.37).sin());
    let err = grad_check_params(
        |g, st| {
            let x = g.input(img.clone());
            let l = g.constant(lang.clone());
            let y = pixel_features(g, st, "pix", x, l)?;
            probe_loss(g, y)
        },
        &store,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn language_embedding_changes_pixel_output() {
    let store = pixel_store(5);
    let img = small_image(6);
    let mut g = Graph::new();
    let x = g.constant(img);
    let l1 = g.constant(Tensor::from_fn(&[2, 5], |_| 0.5));
    let l2 = g.constant(Tensor::from_fn(&[2, 5], |_| -0.5));
    let y1 = pixel_features(&mut g, &store, "pix", x, l1).unwrap();
    let y2 = pixel_features(&mut g, &store, "pix", x, l2).unwrap();
    assert!(g.value(y1).max_abs_diff(g.value(y2)) > 1e-6);
}

#[test]
fn rendered_images_convert_and_bad_shapes_are_rejected() {
    let s = scene(2);
    let img = render_image(&s, &seen_cameras()[0]).unwrap();
    let t = images_to_tensor::<f32>(&[&img, &img], 32, 32).unwrap();
    assert_eq!(t.shape(), &[2, 3, 32, 32]);
    // channel-major layout: first plane is red values
    assert_eq!(t.data()[5], img.data[15]);
    assert!(matches!(images_to_tensor::<f32>(&[&img], 16, 16), Err(Error::Dimension(_))));
}

use advdepth::attack::{craft, AttackConfig};
use advdepth::depth_net::*;
use advdepth::scenegen::{generate, make_dataset, Scene, SceneParams};
use advdepth::targets::{build_target, TargetSpec};
use advdepth::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn small_params() -> SceneParams {
    SceneParams {
        height: 32,
        width: 64,
        max_objects: 5,
        ..SceneParams::default()
    }
}

fn are(model: &DepthModel, scenes: &[Scene]) -> f64 {
    let total: f64 = scenes
        .iter()
        .map(|s| {
            let p = model.predict(&s.image).unwrap();
            let sum: f64 = p
                .data()
                .iter()
                .zip(s.depth.data())
                .map(|(a, b)| ((a - b).abs() / b) as f64)
                .sum();
            sum / p.len() as f64
        })
        .sum();
    total / scenes.len() as f64
}

#[test]
fn model_a_stage_shapes() {
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    let mut g = Graph::<f32>::new();
    let p = m.bind(&mut g, false).unwrap();
    let x = g.constant(Tensor::full(vec![3, 64, 128], 0.5)).unwrap();
    let mut shapes = Vec::new();
    let out = m
        .forward_graph_traced(&mut g, &p, x, |l, t| {
            if l.name.starts_with("enc") {
                shapes.push(t.shape().to_vec());
            }
        })
        .unwrap();
    assert_eq!(shapes, vec![vec![8, 32, 64], vec![16, 16, 32], vec![32, 8, 16]]);
    assert_eq!(g.value(out).shape(), [1, 64, 128]);
}

#[test]
fn architectures_share_io_but_not_size() {
    assert_ne!(param_count(Architecture::ModelA), param_count(Architecture::ModelB));
    let x = Tensor::full(vec![3, 64, 128], 0.3);
    for arch in Architecture::ALL {
        let m = DepthModel::new(arch, DepthRange::default(), 3);
        assert_eq!(m.predict(&x).unwrap().shape(), [1, 64, 128]);
        assert_eq!(m.param_count(), param_count(arch));
    }
}

#[test]
fn unknown_architecture_is_config_error() {
    assert!(matches!("ModelC".parse::<Architecture>(), Err(Error::Config(_))));
}

#[test]
fn bad_input_shape_is_rejected() {
    let m = DepthModel::new(Architecture::ModelB, DepthRange::default(), 0);
    assert!(m.predict(&Tensor::zeros(vec![3, 30, 64])).is_err());
    assert!(m.predict(&Tensor::zeros(vec![1, 32, 64])).is_err());
}

#[test]
fn init_is_seeded() {
    // frozen digest of the seed-0 ModelA weights
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    let again = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    assert_eq!(m.weight_bytes(), again.weight_bytes());
    let other = DepthModel::new(Architecture::ModelA, DepthRange::default(), 1);
    assert_ne!(m.weight_bytes(), other.weight_bytes());
    let digest = hex::encode(Sha256::digest(m.weight_bytes()));
    assert_eq!(digest, INIT_DIGEST);
}

const INIT_DIGEST: &str = "310e042ae5b9e299f05bb751d63ed7b40d172353189765ad4e326677d73665ec";

#[test]
fn save_load_roundtrip() {
    let m = DepthModel::new(Architecture::ModelB, DepthRange::default(), 5);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = DepthModel::load(dir.path()).unwrap();
    assert_eq!(back.weight_bytes(), m.weight_bytes());
    assert_eq!(back.architecture(), Architecture::ModelB);
    assert_eq!(back.range(), m.range());
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let ds = make_dataset(2, 3, 1, &small_params()).unwrap();
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let trained = train(&m, &ds.train, &cfg).unwrap();
    assert_eq!(trained.weight_bytes(), m.weight_bytes());
}

#[test]
fn empty_dataset_is_data_error() {
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    assert!(matches!(
        train(&m, &[], &TrainConfig::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn memorises_single_sample() {
    let scene = generate(11, &small_params()).unwrap();
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 0);
    let cfg = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: 1,
        lr: 3e-3,
        lr_decay: 0.999,
        seed: 0,
    };
    let data = [scene];
    let (trained, history) = train_with_history(&m, &data, &cfg).unwrap();
    let fit = are(&trained, &data);
    assert!(history[0] > fit);
    assert!(fit <= 0.05, "single-sample ARE {fit}");
}

const OVERFIT_EPOCHS: usize = 2000;

#[test]
fn held_out_error_after_training() {
    let ds = make_dataset(0, 200, 20, &SceneParams::default()).unwrap();
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 1);
    let trained = train(&m, &ds.train, &TrainConfig::default()).unwrap();
    let held_out = are(&trained, &ds.test);
    assert!(held_out <= 0.15, "held-out ARE {held_out}");
}

#[test]
fn mean_depth_gradient_matches_differences() {
    let scene = generate(4, &small_params()).unwrap();
    let m = DepthModel::new(Architecture::ModelA, DepthRange::default(), 2);
    let mut g = Graph::<f32>::new();
    let p = m.bind(&mut g, false).unwrap();
    let x = g.leaf(scene.image.clone(), true).unwrap();
    let d = m.forward_graph(&mut g, &p, x).unwrap();
    let mean = g.mean_all(d);
    g.backward(mean).unwrap();
    let grad = g.grad_f64(x).unwrap().to_vec();

    let mean_at = |img: &Tensor| m.predict(img).unwrap().mean();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-2;
    for _ in 0..10 {
        let i = rng.gen_range(0..scene.image.len());
        let mut up = scene.image.clone();
        let mut down = scene.image.clone();
        up.data_mut()[i] += h as f32;
        down.data_mut()[i] -= h as f32;
        let fd = (mean_at(&up) - mean_at(&down)) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5);
        assert!(err <= 1e-2, "pixel {i}: fd {fd} backward {}", grad[i]);
    }
}

#[test]
fn attacking_does_not_touch_weights() {
    let scene = generate(8, &small_params()).unwrap();
    let m = DepthModel::new(Architecture::ModelB, DepthRange::default(), 0);
    let before = m.weight_bytes();
    let t = build_target(&m, &scene, &TargetSpec::Scale(0.1), None).unwrap();
    let mut cfg = AttackConfig::new(2e-2);
    cfg.steps = 5;
    craft(&m, &scene.image, &t.depth, &cfg).unwrap();
    assert_eq!(m.weight_bytes(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_stay_in_range(seed in any::<u64>(), lo in -3.0f32..0.5, span in 0.0f32..6.0, arch in 0usize..2) {
        let m = DepthModel::new(Architecture::ALL[arch], DepthRange::default(), seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![3, 16, 32], |_| lo + span * rng.gen::<f32>());
        let d = m.predict(&x).unwrap();
        prop_assert!(d.data().iter().all(|&v| (1.0..=80.0).contains(&v)));
    }
}

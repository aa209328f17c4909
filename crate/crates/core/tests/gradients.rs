use densetrf::backbone::FeatureMap;
use densetrf::gradcheck::check_gradients;
use densetrf::head::HeadConfig;
use densetrf::model::{DenseTrfModel, ModelConfig, Trainable};
use densetrf::params::ParameterSet;
use densetrf::slot::{permute_patch_order, PositionGrid, SlotConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn tiny(concat: bool) -> ModelConfig {
    ModelConfig {
        feature_channels: 5,
        slots: SlotConfig {
            num_slots: 2,
            slot_dim: 8,
            num_iterations: 2,
            adapted_dim: 4,
            mlp_hidden: 7,
        },
        head: HeadConfig {
            adapter_hidden: 6,
            classifier_hidden: 6,
            num_classes: 2,
            concat,
        },
    }
}

fn random_features(seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(Array3::from_shape_fn((2, 2, 5), |_| rng.gen_range(-1.0..1.0)), 2).unwrap()
}

fn random_labels(seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((4, 4, 2), |_| rng.gen_range(0..2))
}

fn assert_all_close(checks: &[densetrf::gradcheck::TensorCheck]) {
    for c in checks {
        assert!(
            c.passes(TOL),
            "{}: relative error {:.3e}, absolute {:.3e}",
            c.name,
            c.relative_error,
            c.absolute_error
        );
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    for concat in [true, false] {
        let model = DenseTrfModel::new(tiny(concat));
        let mut theta = model.init_theta(3);
        let mut head = model.init_head(4);
        let f = random_features(5);
        let y = random_labels(6);
        let all = Trainable { theta: true, head: true };
        let mut gt = theta.zeros_like();
        let mut gh = head.zeros_like();
        model
            .joint_step(&theta, &head, Some((&mut gt, &mut gh)), all, &f, y.view(), 0.1, 9)
            .unwrap();

        let h = head.clone();
        let checks = check_gradients(&mut theta, &gt, EPS, |p| {
            model.joint_step(p, &h, None, all, &f, y.view(), 0.1, 9).unwrap().total
        });
        assert_all_close(&checks);
        let t = theta.clone();
        let checks = check_gradients(&mut head, &gh, EPS, |p| {
            model.joint_step(&t, p, None, all, &f, y.view(), 0.1, 9).unwrap().total
        });
        assert_all_close(&checks);
    }
}

#[test]
fn reconstruction_gradients_match_with_permuted_positions() {
    let model = DenseTrfModel::new(tiny(true));
    let mut theta = model.init_theta(7);
    let f = random_features(8);
    let pos = permute_patch_order(&PositionGrid::sinusoidal(2, 2), 1);
    let mut g = theta.zeros_like();
    model.recon_step(&theta, Some(&mut g), &f, &pos, 2).unwrap();
    let checks = check_gradients(&mut theta, &g, EPS, |p| model.recon_step(p, None, &f, &pos, 2).unwrap());
    assert_all_close(&checks);
    assert!(checks.iter().filter(|c| c.analytic_norm > 0.0).count() >= checks.len() - 1);
}

#[test]
fn lambda_zero_decoder_gradient_is_bce_gradient() {
    let model = DenseTrfModel::new(tiny(true));
    let mut theta = model.init_theta(10);
    let head = model.init_head(11);
    let f = random_features(12);
    let y = random_labels(13);
    let all = Trainable { theta: true, head: true };
    let mut gt = theta.zeros_like();
    let mut gh = head.zeros_like();
    model
        .joint_step(&theta, &head, Some((&mut gt, &mut gh)), all, &f, y.view(), 0.0, 1)
        .unwrap();
    let decoder_only = |p: &ParameterSet| p.subset(&["decoder."]);
    let bce_fd = check_gradients(&mut theta, &gt, EPS, |p| {
        model.joint_step(p, &head, None, all, &f, y.view(), 0.0, 1).unwrap().bce
    });
    let names: Vec<String> = decoder_only(&gt).names().map(String::from).collect();
    for c in bce_fd.iter().filter(|c| names.contains(&c.name)) {
        assert!(c.passes(TOL), "{}: {:.3e}", c.name, c.relative_error);
    }
}

use ocrm_core::autodiff::Tensor;
use ocrm_core::container;
use ocrm_core::matrix::Matrix;
use ocrm_core::networks::Module;
use ocrm_core::pipeline::{
    augment, extract_features, fit_svdd_stage, gan_losses, generator_gradients, infer_score,
    recon_error, sample_prior, score_images, train, train_step, write_loss_csv, Arm, Detector,
    LossTerms, Networks, Optimizers, TrainConfig,
};
use ocrm_core::svdd::{self, Kernel};
use ocrm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Blurry blobs with a little noise; easy to reconstruct.
fn blobs<T: ocrm_core::Element>(n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 1024);
    for _ in 0..n {
        let (cy, cx) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
        for y in 0..32 {
            for x in 0..32 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / 30.0).exp() + rng.random_range(0.0..0.05);
                data.push(T::from_f64_lossy(v.min(1.0)));
            }
        }
    }
    Tensor::new(vec![n, 1, 32, 32], data).unwrap()
}

fn small(arm: Arm) -> TrainConfig {
    TrainConfig {
        k: 16,
        epochs: 2,
        batch_size: 8,
        arm,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn recon_error_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..3 * 1024).map(|_| rng.random_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..3 * 1024).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut direct = 0.0;
    for i in 0..a.len() {
        direct += (a[i] - b[i]) * (a[i] - b[i]);
    }
    direct /= a.len() as f64;
    let ta = Tensor::new(vec![3, 32, 32], a).unwrap();
    let tb = Tensor::new(vec![3, 32, 32], b).unwrap();
    assert!((recon_error(&ta, &tb).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn augmented_feature_splits_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let k = rng.random_range(1..40);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e = rng.random_range(0.0..1.0);
        let f = augment(&z, e).unwrap();
        assert_eq!(f.values().len(), 2 * k);
        let (zz, ee) = f.split();
        assert_eq!(zz, &z[..]);
        assert_eq!(ee, e);
        assert!(f.values()[k..].iter().all(|&v| v == e));
    }
}

#[test]
fn prior_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s: Tensor<f64> = sample_prior(100_000, 4, &mut rng).unwrap();
    for j in 0..4 {
        let col: Vec<f64> = s.data().iter().skip(j).step_by(4).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(
            mean.abs() < 0.02 && (var - 1.0).abs() < 0.02,
            "dim {j}: {mean} {var}"
        );
    }
}

#[test]
fn gan_losses_with_a_confident_discriminator() {
    let cfg = small(Arm::Full);
    let mut nets = Networks::<f64>::new(1, &cfg).unwrap();
    // a huge output bias drives D to 1 on everything
    nets.discriminator.as_mut().unwrap().layers[2]
        .bias
        .data_mut()[0] = 100.0;
    let d = nets.discriminator.unwrap();
    let real = Tensor::zeros(vec![4, 32]);
    let (ld, lg) = gan_losses(&d, &real, &real).unwrap();
    assert!(ld > 15.0 && ld.is_finite(), "{ld}");
    assert!(lg < 1e-6);
}

#[test]
fn composite_gradient_is_linear_in_its_terms() {
    let cfg = small(Arm::Full);
    let nets = Networks::<f64>::new(1, &cfg).unwrap();
    let batch = blobs::<f64>(4, 5);
    for lambda in [1.0, 0.37] {
        let both = generator_gradients(
            &nets,
            &batch,
            Arm::Full,
            lambda,
            LossTerms {
                reconstruction: true,
                adversarial: true,
            },
        )
        .unwrap();
        let rec = generator_gradients(
            &nets,
            &batch,
            Arm::Full,
            lambda,
            LossTerms {
                reconstruction: true,
                adversarial: false,
            },
        )
        .unwrap();
        let adv = generator_gradients(
            &nets,
            &batch,
            Arm::Full,
            lambda,
            LossTerms {
                reconstruction: false,
                adversarial: true,
            },
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for ((b, r), a) in both.iter().zip(&rec).zip(&adv) {
            for ((x, y), z) in b.iter().zip(r).zip(a) {
                worst = worst.max((x - (y + z)).abs());
            }
        }
        assert!(worst < 1e-8, "lambda {lambda}: {worst:e}");
    }
}

#[test]
fn neutral_discriminator_gives_no_adversarial_gradient() {
    let cfg = small(Arm::Full);
    let mut nets = Networks::<f64>::new(1, &cfg).unwrap();
    nets.discriminator = Some(ocrm_core::networks::Discriminator::zeroed(32));
    let batch = blobs::<f64>(4, 6);
    let adv = generator_gradients(
        &nets,
        &batch,
        Arm::Full,
        0.0,
        LossTerms {
            reconstruction: true,
            adversarial: true,
        },
    )
    .unwrap();
    assert!(adv.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn train_step_is_bitwise_reproducible() {
    let cfg = small(Arm::Full);
    let batch = blobs::<f32>(8, 7);
    let once = || {
        let mut nets = Networks::<f32>::new(1, &cfg).unwrap();
        let mut opt = Optimizers::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = train_step(&batch, &mut nets, &mut opt, &cfg, &mut rng).unwrap();
        (s, nets)
    };
    assert_eq!(once(), once());
}

#[test]
fn reconstruction_loss_falls_on_learnable_data() {
    let cfg = TrainConfig {
        k: 16,
        arm: Arm::Full,
        ..TrainConfig::default()
    };
    let batch = blobs::<f32>(64, 8);
    let mut nets = Networks::<f32>::new(1, &cfg).unwrap();
    let mut opt = Optimizers::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let first = train_step(&batch, &mut nets, &mut opt, &cfg, &mut rng)
        .unwrap()
        .l_mse;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&batch, &mut nets, &mut opt, &cfg, &mut rng)
            .unwrap()
            .l_mse;
    }
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn arms_without_discriminator_train_identically() {
    let images = blobs::<f32>(24, 9);
    let a = train(&images, &small(Arm::AeSvdd)).unwrap();
    let b = train(&images, &small(Arm::AeMse)).unwrap();
    assert_eq!(a.networks.encoder, b.networks.encoder);
    assert_eq!(a.networks.decoder, b.networks.decoder);
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|e| e.loss_g == 0.0 && e.loss_d == 0.0));
}

#[test]
fn training_is_deterministic_and_history_is_complete() {
    let images = blobs::<f32>(24, 10);
    let cfg = small(Arm::Full);
    let a = train(&images, &cfg).unwrap();
    let b = train(&images, &cfg).unwrap();
    assert_eq!(a.history.len(), cfg.epochs);
    let csv = |m: &ocrm_core::TrainedModel| {
        let mut buf = Vec::new();
        write_loss_csv(&m.history, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    assert!(a
        .history
        .iter()
        .all(|e| e.l_mse.is_finite() && e.loss_g.is_finite() && e.loss_d.is_finite()));
}

#[test]
fn latent_only_arms_discriminate_raw_codes() {
    let cfg = small(Arm::AeDiscSvdd);
    let nets = Networks::<f32>::new(1, &cfg).unwrap();
    assert_eq!(nets.discriminator.as_ref().unwrap().input_dim(), 16);
    let nets = Networks::<f32>::new(1, &small(Arm::Full)).unwrap();
    assert_eq!(nets.discriminator.as_ref().unwrap().input_dim(), 32);
}

#[test]
fn training_rejects_bad_input() {
    let cfg = small(Arm::Full);
    assert!(matches!(
        train(&blobs::<f32>(1, 0), &cfg),
        Err(Error::EmptyDataset)
    ));
    let bad = TrainConfig { lambda: 0.0, ..cfg };
    assert!(matches!(
        train(&blobs::<f32>(4, 0), &bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn svdd_stage_and_scoring() {
    let images = blobs::<f32>(24, 11);
    let model = train(&images, &small(Arm::Full)).unwrap();
    let f1 = extract_features(&model, &images).unwrap();
    let f2 = extract_features(&model, &images).unwrap();
    assert_eq!(f1, f2);
    let sphere = fit_svdd_stage(&model, &images).unwrap();
    let sum: f64 = sphere.alphas().iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(sphere.dim(), 32);

    let det = Detector {
        model: model.clone(),
        svdd: None,
    };
    assert!(matches!(det.score_images(&images), Err(Error::Contract(_))));
    let det = Detector {
        model,
        svdd: Some(sphere),
    };
    let one = images
        .slice_outer(0, 1)
        .unwrap()
        .reshape(vec![1, 32, 32])
        .unwrap();
    let s1 = infer_score(&det, &one).unwrap();
    assert_eq!(s1, infer_score(&det, &one).unwrap());
    let batch = det.score_images(&images).unwrap();
    assert!((batch[0] - s1).abs() < 1e-9);
}

#[test]
fn mse_arm_scores_are_reconstruction_errors() {
    let images = blobs::<f32>(12, 12);
    let model = train(&images, &small(Arm::AeMse)).unwrap();
    let feats = extract_features(&model, &images).unwrap();
    assert_eq!(score_images(&model, None, &images).unwrap(), feats.errors);
}

#[test]
fn sphere_on_toy_latent_matches_oracle_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let fast = svdd::fit(&x, 0.2, Kernel::Linear, 1e-6).unwrap();
    let slow = svdd::oracle_fit(&x, 0.2, Kernel::Linear).unwrap();
    assert!((fast.radius2() - slow.radius2()).abs() <= 0.1 * slow.radius2());
}

#[test]
fn container_round_trip_preserves_scores_bitwise() {
    let images = blobs::<f32>(24, 14);
    for arm in [Arm::Full, Arm::AeMse, Arm::AeDiscSvdd] {
        let model = train(&images, &small(arm)).unwrap();
        let svdd = arm
            .uses_svdd()
            .then(|| fit_svdd_stage(&model, &images).unwrap());
        let det = Detector { model, svdd };
        let bytes = container::to_bytes(&det);
        assert_eq!(&bytes[..5], b"OCRM1");
        let back: Detector<f32> = container::from_bytes(&bytes).unwrap();
        assert_eq!(back, det);
        assert_eq!(
            back.score_images(&images).unwrap(),
            det.score_images(&images).unwrap()
        );
        assert_eq!(container::to_bytes(&back), bytes);
    }
}

#[test]
fn container_rejects_corruption() {
    let images = blobs::<f32>(8, 15);
    let det = Detector {
        model: train(&images, &small(Arm::AeMse)).unwrap(),
        svdd: None,
    };
    let bytes = container::to_bytes(&det);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(container::from_bytes::<f32>(&bad).is_err());
    assert!(container::from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
    assert!(container::from_bytes::<f64>(&bytes).is_err());
}

#[test]
fn generator_parameter_order_matches_modules() {
    let nets = Networks::<f32>::new(1, &small(Arm::Full)).unwrap();
    let names: Vec<String> = nets
        .encoder
        .parameters()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert!(names[0].starts_with("encoder.conv0"));
}

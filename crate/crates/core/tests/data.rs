use hazekit_core::data::io::quantize;
use hazekit_core::data::{
    augment, build_real_dataset, build_synthetic_dataset, synthesize_haze, CleanSource, HazeParams, PairedDataset,
    RealDataset, ScalarField, Transform,
};
use hazekit_core::metrics::haze_density_proxy;
use hazekit_core::Error;
use hazekit_tape::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() }
}

#[test]
fn every_synthetic_pair_is_hazier_than_its_clean_image() {
    let d = build_synthetic_dataset(&CleanSource::Procedural { size: 32 }, 48, 0).unwrap();
    for (i, (h, c)) in d.hazy.iter().zip(&d.clean).enumerate() {
        let (ph, pc) = (haze_density_proxy(h), haze_density_proxy(c));
        assert!(ph > pc, "pair {i}: proxy {ph} vs {pc}");
    }
}

#[test]
fn real_domain_differs_from_synthetic_and_stays_in_range() {
    let src = CleanSource::Procedural { size: 32 };
    let r = build_real_dataset(&src, 12, 0).unwrap();
    let s = build_synthetic_dataset(&src, 12, 0).unwrap();
    assert_eq!(r.len(), 12);
    assert_ne!(r.images, s.hazy);
    for img in &r.images {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(r, build_real_dataset(&src, 12, 0).unwrap());
}

#[test]
fn augmentation_moves_paired_pixels_together() {
    // index-coordinate image: every pixel value is unique, so the transform
    // is a recoverable permutation
    let (h, w) = (12, 12);
    let coords: Tensor<f32> = Tensor::new(vec![1, 3, h, w], (0..3 * h * w).map(|i| i as f32).collect());
    let scaled = coords.map(|v| v / 1000.0);
    for seed in 0..16 {
        let (a, b) = augment(&coords, &scaled, seed, 8).unwrap();
        assert_eq!(a.shape(), &[1, 3, 8, 8]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x / 1000.0 - y).abs() < 1e-6);
        }
        let mut seen: Vec<f32> = a.data().to_vec();
        seen.sort_by(f32::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), a.numel());
    }
}

#[test]
fn augment_rejects_mismatched_or_small_pairs() {
    let a: Tensor<f32> = Tensor::zeros(vec![1, 3, 8, 8]);
    let b: Tensor<f32> = Tensor::zeros(vec![1, 3, 8, 6]);
    assert!(matches!(augment(&a, &b, 0, 4), Err(Error::Dimension(_))));
    assert!(matches!(augment(&a, &a, 0, 9), Err(Error::Input(_))));
}

#[test]
fn paired_dataset_round_trips_through_png() {
    let d = build_synthetic_dataset(&CleanSource::Procedural { size: 16 }, 3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = d.write(dir.path()).unwrap();
    let back = PairedDataset::read(&manifest).unwrap();
    assert_eq!(back.seed, 5);
    for (orig, read) in d.hazy.iter().chain(&d.clean).zip(back.hazy.iter().chain(&back.clean)) {
        for (o, r) in orig.data().iter().zip(read.data()) {
            assert_eq!(quantize(*o) as f32 / 255.0, *r);
        }
    }
    // the hazy side doubles as an unlabelled set
    let real = RealDataset::read(&manifest).unwrap();
    assert_eq!(real.images, back.hazy);
}

#[test]
fn real_dataset_round_trips_through_png() {
    let r = build_real_dataset(&CleanSource::Procedural { size: 16 }, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = r.write(dir.path()).unwrap();
    let back = RealDataset::read(&manifest).unwrap();
    assert_eq!(back.len(), 2);
    assert!(matches!(PairedDataset::read(&manifest), Err(Error::Input(_))));
}

#[test]
fn clean_corpus_directory_is_a_source() {
    let d = build_synthetic_dataset(&CleanSource::Procedural { size: 16 }, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in d.clean.iter().enumerate() {
        hazekit_core::data::save_png(&dir.path().join(format!("{i}.png")), c).unwrap();
    }
    let src = CleanSource::from_dir(dir.path()).unwrap();
    let built = build_synthetic_dataset(&src, 4, 0).unwrap();
    assert_eq!(built.len(), 4);
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(CleanSource::from_dir(empty.path()), Err(Error::Input(_))));
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn haze_output_stays_in_unit_range(
        pixels in prop::collection::vec(0.0f32..=1.0, 3 * 16),
        depth in prop::collection::vec(0.0f64..3.0, 16),
        beta in 0.0f64..3.0,
        a in 0.7f64..=1.0,
    ) {
        let img = Tensor::new(vec![1, 3, 4, 4], pixels);
        let p = HazeParams::new([a; 3], beta, ScalarField::new(4, 4, depth).unwrap()).unwrap();
        let out = synthesize_haze(&img, &p).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn transmission_never_grows_with_beta(depth in prop::collection::vec(0.0f64..3.0, 9), b1 in 0.0f64..3.0, extra in 0.0f64..2.0) {
        let field = ScalarField::new(3, 3, depth).unwrap();
        let t1 = HazeParams::new([0.8; 3], b1, field.clone()).unwrap().transmission();
        let t2 = HazeParams::new([0.8; 3], b1 + extra, field).unwrap().transmission();
        for (x, y) in t1.values.iter().zip(&t2.values) {
            prop_assert!(y <= x);
            prop_assert!(*y > 0.0 && *x <= 1.0);
        }
    }

    #[test]
    fn augmenting_a_pair_of_equal_images_keeps_them_equal(seed in any::<u64>(), pixels in prop::collection::vec(0.0f32..=1.0, 3 * 36)) {
        let img = Tensor::new(vec![1, 3, 6, 6], pixels);
        let (a, b) = augment(&img, &img, seed, 4).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sampled_transforms_fit_the_frame(seed in any::<u64>(), h in 4usize..20, w in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = h.min(w) / 2 + 1;
        let t = Transform::sample(&mut rng, h, w, crop).unwrap();
        let img: Tensor<f32> = Tensor::zeros(vec![1, 3, h, w]);
        let out = t.apply(&img).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, crop, crop]);
    }
}

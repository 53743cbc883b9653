use candle_core::{DType, Device, Tensor};
use mcfnet::checkpoint::Checkpoint;
use mcfnet::colorspace::{ColorSpace, ImagePlane};
use mcfnet::data::{
    augment, load_dataset, make_synthetic_pairs, write_dataset, AugmentSpec, CropMode, Dataset, SamplePair, NIR_DIR,
};
use mcfnet::model::ModelConfig;
use mcfnet::trainer::{lr_at_epoch, train, TrainConfig, Trainer, CHECKPOINT_FILE};
use mcfnet::Error;
use proptest::prelude::*;
use tempfile::TempDir;

fn tiny_config(total_epochs: usize, stage1_end: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        total_epochs,
        stage1_end,
        batch_size: 4,
        model: ModelConfig {
            grm_width: 2,
            gb_width: 2,
            cfem_width: 2,
            feature_channels: 2,
            fusion_width: 2,
            spade_hidden: 2,
            disc_width: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.augment.crop_size = 24;
    cfg
}

#[test]
fn dataset_survives_disk_round_trip() {
    let tmp = TempDir::new().unwrap();
    let samples = make_synthetic_pairs(5, 32, 3).unwrap();
    write_dataset(&samples, tmp.path()).unwrap();
    let loaded = load_dataset(tmp.path(), false).unwrap();
    assert_eq!(loaded.len(), 5);
    assert_eq!(loaded.paired_count(), 5);
    for (a, b) in samples.iter().zip(&loaded.samples) {
        assert_eq!(a.id, b.id);
        // NIR is generated on the 8-bit grid, so it is stored exactly.
        assert_eq!(a.nir, b.nir);
        let (ra, rb) = (a.rgb.as_ref().unwrap(), b.rgb.as_ref().unwrap());
        let worst = ra.data().iter().zip(rb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn unpaired_stems_need_opt_in() {
    let tmp = TempDir::new().unwrap();
    write_dataset(&make_synthetic_pairs(3, 32, 3).unwrap(), tmp.path()).unwrap();
    let extra = make_synthetic_pairs(1, 32, 9).unwrap().remove(0);
    mcfnet::data::save_image(&extra.nir, &tmp.path().join(NIR_DIR).join("lonely.png")).unwrap();
    match load_dataset(tmp.path(), false) {
        Err(Error::MissingCounterpart { stem, .. }) => assert_eq!(stem, "lonely"),
        other => panic!("expected missing counterpart, got {:?}", other.map(|d| d.len())),
    }
    let ds = load_dataset(tmp.path(), true).unwrap();
    assert_eq!((ds.len(), ds.paired_count()), (4, 3));
    assert_eq!(ds.nir_pool().len(), 4);
    assert_eq!(ds.rgb_pool().len(), 3);
}

#[test]
fn empty_directories_give_an_empty_dataset() {
    let tmp = TempDir::new().unwrap();
    std::fs::create_dir_all(tmp.path().join("nir")).unwrap();
    std::fs::create_dir_all(tmp.path().join("rgb")).unwrap();
    assert!(load_dataset(tmp.path(), false).unwrap().is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let ds = Dataset::from_pairs(make_synthetic_pairs(8, 32, 5).unwrap());
    let mut straight = Trainer::new(tiny_config(3, 1)).unwrap();
    let full = straight.fit(&ds, None).unwrap();

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join(CHECKPOINT_FILE);
    let mut first = Trainer::new(tiny_config(3, 1)).unwrap();
    first.run_epoch(&ds).unwrap();
    first.run_epoch(&ds).unwrap();
    first.checkpoint().unwrap().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.epoch(), 2);
    let rest = resumed.fit(&ds, None).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].generator, full[2].generator);
    assert_eq!((rest[0].disc_a, rest[0].disc_b), (full[2].disc_a, full[2].disc_b));
}

#[test]
fn train_writes_logs_and_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ds = Dataset::from_pairs(make_synthetic_pairs(4, 32, 2).unwrap());
    let outcome = train(tiny_config(2, 1), &ds, Some(tmp.path())).unwrap();
    assert_eq!(outcome.epochs.len(), 2);
    for f in ["train_log.csv", "train_log.jsonl", "batches.csv", "model.ckpt", "model.ckpt.json"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let ckpt = Checkpoint::load(&tmp.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 2);
    let model = ckpt.build_model(DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
    assert_eq!(model.colorize(&x).unwrap().y_rgb.dims(), &[1, 3, 32, 32]);
}

/// A pair whose red channel equals the NIR input, so any mismatch in the
/// geometric transforms shows up as a pixel difference.
fn traceable_pair(size: usize, seed: u64) -> SamplePair {
    let nir = make_synthetic_pairs(1, size, seed).unwrap().remove(0).nir;
    let rgb = ImagePlane::from_fn(ColorSpace::Rgb, size, size, |c, y, x| {
        let v = nir.get(0, y, x);
        if c == 0 {
            v
        } else {
            1.0 - v
        }
    })
    .unwrap();
    SamplePair::new("trace", nir, Some(rgb)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_shape_range_and_determinism(
        seed in any::<u64>(),
        crop in prop::sample::select(vec![8usize, 16, 24, 32]),
        resize_hi in 1.0f64..1.5,
        contrast_lo in 0.5f64..1.0,
        contrast_hi in 1.0f64..1.5,
    ) {
        let pair = traceable_pair(32, 1);
        let spec = AugmentSpec {
            resize_range: (1.0, resize_hi),
            crop_size: crop,
            contrast_range: (contrast_lo, contrast_hi),
            seed,
            ..AugmentSpec::default()
        };
        let a = augment(&pair, &spec).unwrap();
        let b = augment(&pair, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.nir.dims(), (1, crop, crop));
        prop_assert_eq!(a.rgb.as_ref().unwrap().dims(), (3, crop, crop));
        prop_assert!(a.nir.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_and_mirror_are_shared_by_both_members(seed in any::<u64>(), crop in prop::sample::select(vec![8usize, 16, 24])) {
        let pair = traceable_pair(32, 4);
        let spec = AugmentSpec {
            resize_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            crop_size: crop,
            crop_mode: CropMode::Random,
            seed,
            ..AugmentSpec::default()
        };
        let out = augment(&pair, &spec).unwrap();
        prop_assert_eq!(out.nir.channel(0), out.rgb.as_ref().unwrap().channel(0));
    }

    #[test]
    fn lr_never_increases(total in 3usize..400, frac in 0.05f64..0.95) {
        let stage1_end = ((total as f64 * frac) as usize).clamp(1, total - 1);
        let cfg = TrainConfig { total_epochs: total, stage1_end, ..TrainConfig::default() };
        let lrs: Vec<f64> = (1..=total).map(|e| lr_at_epoch(e, &cfg).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], cfg.base_lr);
        prop_assert!((lrs[total - 1] - 0.01 * cfg.base_lr).abs() < 1e-18);
    }
}

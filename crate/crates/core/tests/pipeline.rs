//! End-to-end use of the public API: a teacher model produces spectra, a
//! student is trained on them and then queried at unseen transmitters.

use voxelrf_core::metrics::{ssim, SsimConfig};
use voxelrf_core::renderer::{aggregate_rssi, default_step, render_spectrum};
use voxelrf_core::trainer::{dataset_spectrum_loss, train, TrainingRecord};
use voxelrf_core::{Aabb, FieldModel, ModelConfig, SceneGeometry, TrainConfig, TrainingSet, Vec3};

fn small_config() -> ModelConfig {
    ModelConfig {
        dims: [12, 12, 12],
        feature_dim: 4,
        hidden_width: 16,
        ..ModelConfig::desk()
    }
}

fn teacher_data(n: usize, offset: usize) -> (TrainingSet, FieldModel, f64) {
    let bbox = Aabb::new(Vec3::ZERO, Vec3::splat(2.0)).unwrap();
    let geometry = SceneGeometry::new(Vec3::new(1.0, 1.0, 0.6), bbox, 12, 4).unwrap();
    let cfg = ModelConfig {
        density_bias: 0.0,
        ..small_config()
    };
    let teacher = FieldModel::new(&cfg, bbox, 99).unwrap();
    let step = default_step(cfg.dims, &bbox);
    let records = (offset..offset + n)
        .map(|i| {
            let t = i as f64 * 0.37;
            let tx = Vec3::new(1.0 + 0.8 * t.cos(), 1.0 + 0.8 * t.sin(), 0.3 + 1.4 * (t * 0.5).sin().abs());
            let spectrum = render_spectrum(&teacher, &geometry, tx, step, 0.0).unwrap();
            TrainingRecord { tx, spectrum }
        })
        .collect();
    (TrainingSet::new(geometry, records).unwrap(), teacher, step)
}

#[test]
fn student_learns_teacher_spectra() {
    let (data, _, step) = teacher_data(24, 0);
    let mut cfg = TrainConfig::desk().with_total_iters(300);
    cfg.model = small_config();
    cfg.batch_rays = 64;
    cfg.log_interval = 50;

    let initial = FieldModel::new(&cfg.model, *data.geometry.bbox(), cfg.seed).unwrap();
    let before = dataset_spectrum_loss(&initial, &data, step, 0.0).unwrap();
    let outcome = train(&data, cfg.clone()).unwrap();
    let after = dataset_spectrum_loss(&outcome.model, &data, step, 0.0).unwrap();
    assert!(after < 0.5 * before, "loss {before} -> {after}");
    assert_eq!(outcome.model.dims(), cfg.model.dims);
    assert_eq!(outcome.history.last().unwrap().iteration, 299);

    let (unseen, _, _) = teacher_data(4, 100);
    for r in &unseen.records {
        let predicted = render_spectrum(&outcome.model, &unseen.geometry, r.tx, step, cfg.skip_threshold).unwrap();
        assert!(predicted.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(aggregate_rssi(&predicted, -40.0).unwrap().is_finite());
        let score = ssim(&predicted, &r.spectrum, &SsimConfig::default()).unwrap();
        assert!((-1.0..=1.0).contains(&score));
    }
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let (data, _, _) = teacher_data(6, 0);
    let mut cfg = TrainConfig::desk().with_total_iters(20);
    cfg.model = small_config();
    cfg.batch_rays = 16;
    let a = train(&data, cfg.clone()).unwrap().model;
    let b = train(&data, cfg).unwrap().model;
    assert_eq!(a, b);
}

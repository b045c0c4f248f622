//! Library-level pipeline: dataset, training, inversion and report reload.

use vardesign::acoustics::{AirMedium, StlCurve};
use vardesign::apnn::{self, ApnnConfig};
use vardesign::arvae::{self, ArVae, ArVaeSpec, TrainConfig};
use vardesign::dataset::{self, Dataset};
use vardesign::geometry::SamplerConfig;
use vardesign::workflows::{self, InvertConfig, RunHeader};

#[test]
fn dataset_to_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let m = AirMedium::default();
    let data = tmp.path().join("data");
    dataset::generate(&SamplerConfig::new(11, 40), &m, &data).unwrap();
    let mut ds = Dataset::open(&data).unwrap();
    let (train, test) = ds.split(0.7, 11).unwrap();
    assert_eq!(train.len() + test.len(), 40);

    // the split is persisted with the dataset
    let reopened = Dataset::open(&data).unwrap();
    assert_eq!(reopened.manifest.split, ds.manifest.split);

    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::desk(11)
    };
    let (model, rep) = arvae::train_arvae::<f32>(&ds, &cfg, &ArVaeSpec::default(), &tmp.path().join("arvae")).unwrap();
    assert_eq!(rep.epochs.len(), 2);
    let loaded = ArVae::<f32>::load(&tmp.path().join("arvae").join(arvae::CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.response_stats, model.response_stats);

    let acfg = ApnnConfig {
        epochs: 3,
        ..ApnnConfig::desk(11)
    };
    let (ap, _) = apnn::train_apnn::<f32>(&ds, &acfg, &tmp.path().join("apnn")).unwrap();

    let target = StlCurve::new(ds.manifest.grid.clone(), ds.responses[test[0]].clone()).unwrap();
    let icfg = InvertConfig {
        n: 4,
        seed: 5,
        ..InvertConfig::default()
    };
    let h = RunHeader::new(vec!["test".into()], icfg.seed, serde_json::json!({"n": icfg.n}));
    let mut inv = workflows::invert(&loaded, "held_out", &target, &icfg, &m, h).unwrap();
    workflows::parameterized_variant(&mut inv.report, &inv.images, &m).unwrap();
    workflows::add_baselines(&mut inv.report, Some(&ap), Some(&ds), &m).unwrap();

    let nn = inv.report.baselines.iter().find(|b| b.method == "nearest_training").unwrap();
    assert!(nn.mse.is_finite() && nn.mse >= 0.0);

    let out = tmp.path().join("inv");
    workflows::write_report(&out, &inv.report, &inv.images).unwrap();
    assert_eq!(workflows::read_report(&out).unwrap(), inv.report);
    let again = workflows::reevaluate_best(&out, &m).unwrap();
    assert!((again - inv.report.summary.best_mse).abs() <= 1e-9 * (1.0 + again));
}

use icfps::ciss::CenterTag;
use icfps::pipeline::{centers_cloud, centers_meta, icfps, IcfpsConfig, Preset, WeightsBundle};
use icfps::scene::{synth, ScenePreset, SceneSpec};
use icfps::{Error, Rng};

fn scene(seed: u64) -> (icfps::PointCloud, icfps::labels::LabelSet) {
    synth(&SceneSpec::preset(ScenePreset::Small, seed)).unwrap()
}

#[test]
fn output_respects_budgets_and_row_layout() {
    let (cloud, _) = scene(3);
    let weights = WeightsBundle::new(cloud.channels(), &mut Rng::new(1)).unwrap();
    let cfg = IcfpsConfig { m1: 300, m2: 200 };
    let out = icfps(&cloud, &weights, &cfg).unwrap();
    let c = &out.centers;
    assert!(c.len() <= 500);
    assert_eq!(c.features.nrows(), c.len());
    assert_eq!(c.features.ncols(), 3 + 64);
    assert_eq!(c.tags.len(), c.len());
    assert!(c.tags.iter().filter(|t| **t == CenterTag::Centroid).count() <= 300);
    for r in 0..c.len() {
        for a in 0..3 {
            assert_eq!(c.features[[r, a]], c.positions[r][a]);
        }
    }
    assert!(c.features.iter().all(|v| v.is_finite()));
    let meta = centers_meta(&out);
    assert_eq!(meta["count"].as_u64().unwrap() as usize, c.len());
    assert_eq!(centers_cloud(c).unwrap().len(), c.len());
}

#[test]
fn identical_inputs_give_identical_centers() {
    let (cloud, _) = scene(4);
    let weights = WeightsBundle::new(cloud.channels(), &mut Rng::new(2)).unwrap();
    let cfg = IcfpsConfig::from(Preset::S);
    let a = icfps(&cloud, &weights, &cfg).unwrap();
    let b = icfps(&cloud, &weights, &cfg).unwrap();
    assert_eq!(a.centers, b.centers);
}

#[test]
fn weights_survive_a_save_load_round_trip() {
    let (cloud, _) = scene(5);
    let weights = WeightsBundle::new(cloud.channels(), &mut Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    weights.save(&path).unwrap();
    let back = WeightsBundle::load(&path).unwrap();
    let cfg = IcfpsConfig { m1: 256, m2: 256 };
    assert_eq!(icfps(&cloud, &weights, &cfg).unwrap().centers, icfps(&cloud, &back, &cfg).unwrap().centers);
}

#[test]
fn missing_or_corrupt_weights_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let err = WeightsBundle::load(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.json"), "{err}");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"channels\": 1}").unwrap();
    let err = WeightsBundle::load(&bad).unwrap_err();
    assert!(err.to_string().contains("bad.json"), "{err}");
}

#[test]
fn channel_mismatch_is_rejected() {
    let (cloud, _) = scene(6);
    let weights = WeightsBundle::new(cloud.channels() + 2, &mut Rng::new(4)).unwrap();
    let err = icfps(&cloud, &weights, &IcfpsConfig::from(Preset::S)).unwrap_err();
    assert!(!matches!(err, Error::Io { .. }), "{err}");
}

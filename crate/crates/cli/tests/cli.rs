use std::path::Path;

use icfps_cli::{dispatch, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["icfps"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn no_arguments_is_usage_error() {
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["synth", "--seed", "x"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn synth_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    for tag in ["a", "b"] {
        let code = run(&[
            "synth",
            "--seed",
            "7",
            "--out-cloud",
            &p(d.path(), &format!("{tag}.pcf1")),
            "--out-labels",
            &p(d.path(), &format!("{tag}.json")),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    for ext in ["pcf1", "json"] {
        let a = std::fs::read(d.path().join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(d.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_cloud_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let missing = p(d.path(), "absent.pcf1");
    assert_eq!(run(&["partition", "--cloud", &missing, "--out", &p(d.path(), "g.json")]), EXIT_DATA);
    let cfg = d.path().join("bench.json");
    std::fs::write(&cfg, r#"{"scenes":["absent.pcf1"],"methods":[{"name":"fps","m":4}],"repeats":3}"#).unwrap();
    assert_eq!(
        run(&[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--out-json",
            &p(d.path(), "r.json"),
            "--out-csv",
            &p(d.path(), "r.csv"),
        ]),
        EXIT_DATA
    );
    assert!(!d.path().join("r.json").exists());
}

#[test]
fn sample_partition_and_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let cloud = p(d.path(), "s.pcf1");
    let labels = p(d.path(), "s.json");
    assert_eq!(run(&["synth", "--seed", "3", "--out-cloud", &cloud, "--out-labels", &labels]), EXIT_OK);
    assert_eq!(run(&["partition", "--cloud", &cloud, "--out", &p(d.path(), "grid.json")]), EXIT_OK);
    for method in ["fps", "random", "grid-centroid", "ffps"] {
        let out = p(d.path(), &format!("{method}.json"));
        let m = if method == "ffps" { "16" } else { "256" };
        assert_eq!(run(&["sample", "--cloud", &cloud, "--method", method, "--m", m, "--out", &out]), EXIT_OK, "{method}");
        let metrics = p(d.path(), &format!("{method}.metrics.json"));
        assert_eq!(
            run(&["eval", "--cloud", &cloud, "--labels", &labels, "--samples", &out, "--out", &metrics]),
            EXIT_OK
        );
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
        let recall = v["foreground_recall"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&recall));
    }
    let fps: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p(d.path(), "fps.json")).unwrap()).unwrap();
    assert_eq!(fps["indices"][0], 0);
    assert_eq!(fps["indices"].as_array().unwrap().len(), 256);
    assert_eq!(
        run(&["sample", "--cloud", &cloud, "--method", "fps", "--m", "999999", "--out", &p(d.path(), "x.json")]),
        EXIT_DATA
    );
}

#[test]
fn train_then_icfps_and_bench() {
    let d = tempfile::tempdir().unwrap();
    let scenes = d.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    for seed in 0..3 {
        assert_eq!(
            run(&[
                "synth",
                "--seed",
                &seed.to_string(),
                "--out-cloud",
                &p(&scenes, &format!("scene{seed}.pcf1")),
                "--out-labels",
                &p(&scenes, &format!("scene{seed}.json")),
            ]),
            EXIT_OK
        );
    }
    let weights = p(d.path(), "w.json");
    let report = p(d.path(), "train.json");
    assert_eq!(
        run(&[
            "train",
            "--scenes",
            scenes.to_str().unwrap(),
            "--epochs",
            "1",
            "--steps-per-epoch",
            "20",
            "--out",
            &weights,
            "--report",
            &report,
        ]),
        EXIT_OK
    );
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["epochs"].as_array().unwrap().len(), 1);

    let cloud = p(&scenes, "scene0.pcf1");
    let out_a = p(d.path(), "a.pcf1");
    let out_b = p(d.path(), "b.pcf1");
    let meta = p(d.path(), "meta.json");
    for out in [&out_a, &out_b] {
        assert_eq!(
            run(&["icfps", "--cloud", &cloud, "--weights", &weights, "--preset", "s", "--out", out, "--out-meta", &meta]),
            EXIT_OK
        );
    }
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
    assert!(m["m1_eff"].as_u64().unwrap() <= 16384);
    assert_eq!(
        run(&["eval", "--cloud", &cloud, "--labels", &p(&scenes, "scene0.json"), "--samples", &meta]),
        EXIT_OK
    );
    assert_eq!(
        run(&["icfps", "--cloud", &cloud, "--weights", &p(d.path(), "nope.json"), "--out", &out_a]),
        EXIT_DATA
    );

    let cfg = d.path().join("bench.json");
    std::fs::write(
        &cfg,
        r#"{"scenes":[{"cloud":"scenes/scene1.pcf1","labels":"scenes/scene1.json"}],
            "methods":[{"name":"fps","m":512},{"name":"ciss","preset":"s","weights":"w.json"}],
            "repeats":3,"warmups":0,"threads":1,"seed":1}"#,
    )
    .unwrap();
    let (rj, rc) = (p(d.path(), "r.json"), p(d.path(), "r.csv"));
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap(), "--out-json", &rj, "--out-csv", &rc]), EXIT_OK);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rj).unwrap()).unwrap();
    let recs = r["records"].as_array().unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["timings_ms"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(&rc).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

use contrastdx::config::RunConfig;
use contrastdx::inference::SupportIndex;
use contrastdx::pipeline::*;
use contrastdx::trainer::Checkpoint;

const TINY: &str = r#"{
  "seed": 3,
  "unet": {"levels": 2, "base_channels": 2, "latent_dim": 4, "patch_shape": [8, 8, 4], "norm_enabled": true},
  "train": {"epochs": 2, "pairs_per_epoch": 6, "batch_size": 2, "val_k": 3},
  "inference": {"k_grid": [1, 3], "default_k": 3}
}"#;

#[test]
fn stages_round_trip_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = gen_data(&data, [10, 6, 6], 9, [12, 12, 6]).unwrap();
    let config = RunConfig::from_json(TINY).unwrap();

    let ck = train_stage(&config, &data, &tmp.path().join("run")).unwrap();
    let loaded = Checkpoint::load(&tmp.path().join("run").join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(loaded.model, ck.model);
    assert_eq!(loaded.head, ck.head);
    assert_eq!(loaded.history.len(), 2);

    let index = build_index_stage(&ck, &manifest).unwrap();
    assert_eq!(index.len(), 16);
    let index = calibrate_stage(tune_k_stage(index, &ck, &manifest).unwrap()).unwrap();
    assert!([1, 3].contains(&index.k()));
    let dir = tmp.path().join("index");
    index.save(&dir).unwrap();
    let reloaded = SupportIndex::load(&dir).unwrap();
    assert_eq!(reloaded, index);

    let case = &manifest.load_split("test").unwrap()[0];
    let a = predict_case(&index, &ck, case).unwrap();
    let b = predict_case(&reloaded, &loaded, case).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.neighbors.len(), index.k());

    let ex = explain_prediction(&a, &reloaded, &loaded, case, &tmp.path().join("explain")).unwrap();
    assert_eq!(ex.panels.len(), 1 + index.k());
    for p in &ex.panels {
        assert!(tmp.path().join("explain").join(&p.image).exists());
    }

    let report = evaluate_stage(&reloaded, &loaded, &manifest, "test", &tmp.path().join("eval")).unwrap();
    assert_eq!(report.n_cases, 6);
    assert!((0.0..=1.0).contains(&report.auc));
}

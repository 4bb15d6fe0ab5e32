use damamba::model::{count_flops, count_params, param_specs, Checkpoint, Mode, Model, ModelConfig};
use damamba::Tensor;

#[test]
fn counts_agree_with_initialized_store() {
    for cfg in [ModelConfig::micro(), ModelConfig::micro().with_toggles(false, false, false), ModelConfig::tiny()] {
        let specs = param_specs(&cfg);
        let n: usize = specs.iter().map(|s| s.numel()).sum();
        assert_eq!(count_params(&cfg), n as u64);
    }
    let m = Model::new(ModelConfig::micro(), 0).unwrap();
    assert_eq!(m.store.numel() as u64, count_params(&ModelConfig::micro()));
}

#[test]
fn toggles_only_add_parameters_and_work() {
    let full = ModelConfig::micro();
    let base = full.clone().with_toggles(false, false, false);
    assert!(count_params(&full) > count_params(&base));
    assert!(count_flops(&full, 64, 64) > count_flops(&base, 64, 64));
    // flops grow with resolution
    assert!(count_flops(&full, 128, 128) > 3 * count_flops(&full, 64, 64));
}

#[test]
fn checkpoint_file_round_trip() {
    let model = Model::new(ModelConfig::micro(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, 3, 12).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!((ck.step, ck.seed), (3, 12));
    let back = ck.to_model().unwrap();
    let x = Tensor::new(&[1, 64, 64, 3], (0..64 * 64 * 3).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    let a = model.forward(&x, Mode::Eval).unwrap().logits;
    let b = back.forward(&x, Mode::Eval).unwrap().logits;
    assert_eq!(a.data(), b.data());
}

#[test]
fn config_text_round_trip() {
    let cfg = ModelConfig::small().with_toggles(true, false, true);
    let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(ModelConfig::tiny().hash(), cfg.hash());
}

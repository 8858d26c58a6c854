use dfrnn::checkpoint::Checkpoint;
use dfrnn::config::RunConfig;
use dfrnn::model::{Model, ModelConfig, Variant};
use dfrnn_web::Session;

#[test]
fn forecast_lists_modes_that_start_at_the_anchor() {
    let mut s = Session::new(3).unwrap();
    s.generate("stopped_junction", 12).unwrap();
    for v in ["full", "social_only", "map_only"] {
        let f: serde_json::Value = serde_json::from_str(&s.forecast(v).unwrap()).unwrap();
        let modes = f["modes"].as_array().unwrap();
        assert_eq!(modes.len(), ModelConfig::default().modes);
        let total: f64 = modes.iter().map(|m| m["probability"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let first = &modes[0]["path"][0];
        assert!(first[0].as_f64().unwrap().abs() < 5.0);
        assert!(f["metrics"]["min_fde"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn a_checkpoint_replaces_the_model() {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model.clone(), 77).unwrap();
    let text = serde_json::to_string(&Checkpoint::new(&model, &cfg, Variant::Full.architecture(), 4)).unwrap();
    let mut s = Session::new(1).unwrap();
    s.generate("curve", 2).unwrap();
    let before = s.forecast("full").unwrap();
    assert!(s.load_checkpoint(&text).unwrap().contains("epoch 4"));
    assert_ne!(s.forecast("full").unwrap(), before);
    assert!(s.load_checkpoint("{\"format\":1}").is_err());
}

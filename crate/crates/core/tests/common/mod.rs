#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use ltto::experiments::pretraining_population;
use ltto::model::{load_weights, pretrain, save_weights, DepthModel, ModelConfig, PretrainConfig};

/// Sources that determine the trained weights; editing any of them
/// invalidates the cache.
const SOURCES: [&str; 7] = [
    include_str!("../../src/model/mod.rs"),
    include_str!("../../src/model/pretrain.rs"),
    include_str!("../../src/world.rs"),
    include_str!("../../src/autodiff.rs"),
    include_str!("../../src/alignment.rs"),
    include_str!("../../src/spatial.rs"),
    include_str!("../../src/tensor.rs"),
];

/// Path of the cached default model, keyed by configuration and sources.
pub fn model_path() -> PathBuf {
    let key = format!("{:?}{:?}{}", ModelConfig::default(), PretrainConfig::default(), SOURCES.concat());
    let digest = ltto::io::sha256_hex(key.as_bytes());
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("ltto-default-{}.ltto", &digest[..16]))
}

/// The default pretrained model: 200 scenes, default training settings.
/// Trained once and cached on disk; later runs load it.
pub fn pretrained() -> &'static DepthModel {
    static MODEL: OnceLock<DepthModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let path = model_path();
        if let Ok(m) = load_weights(&path) {
            return m;
        }
        let population = pretraining_population(200, 32, 32).unwrap();
        let (model, _) = pretrain(ModelConfig::default(), &population, &PretrainConfig::default()).unwrap();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_weights(&model, &tmp).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        model
    })
}

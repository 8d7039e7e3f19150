//! Scene sets and population-level experiments shared by the CLI and tests.

use serde::{Deserialize, Serialize};

use crate::analysis::pca::ProjectionSpec;
use crate::error::{Error, Result};
use crate::model::DepthModel;
use crate::tto::{adapt, sensor_truth, zero_shot_baseline, AdaptConfig};
use crate::world::{generate_scene, sample_sparse, SceneKind, SceneSample, SparseObservation};

/// Scene geometry and sensor corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    /// Number of sparse measurements.
    pub points: usize,
    pub sensor_scale: f64,
    pub sensor_shift: f64,
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            kind: SceneKind::Mixed,
            height: 32,
            width: 32,
            points: 100,
            sensor_scale: 1.25,
            sensor_shift: 0.4,
            noise: 0.01,
        }
    }
}

impl SceneConfig {
    /// The scene and its observation for `seed`.
    pub fn sample(&self, seed: u64) -> Result<(SceneSample, SparseObservation)> {
        self.sample_kind(self.kind, seed, seed)
    }

    fn sample_kind(&self, kind: SceneKind, scene_seed: u64, obs_seed: u64) -> Result<(SceneSample, SparseObservation)> {
        let scene = generate_scene(kind, self.height, self.width, scene_seed)?;
        let obs = sample_sparse(&scene, self.points, self.sensor_scale, self.sensor_shift, self.noise, obs_seed)?;
        Ok((scene, obs))
    }
}

/// First seed of the held-out scenes; pretraining uses seeds below it.
pub const HELD_OUT_SEED: u64 = 10_000;

/// `n` held-out scenes cycling through all kinds; scene `i` has seed
/// `base + i` and observation seed `base + 500 + i`. `config.kind` is ignored.
pub fn held_out_set(config: &SceneConfig, base: u64, n: usize) -> Result<Vec<(SceneSample, SparseObservation)>> {
    (0..n as u64)
        .map(|i| {
            let kind = SceneKind::ALL[(i % SceneKind::ALL.len() as u64) as usize];
            config.sample_kind(kind, base + i, base + 500 + i)
        })
        .collect()
}

/// Pretraining population: seeds `0..n`, kinds cycling.
pub fn pretraining_population(n: usize, height: usize, width: usize) -> Result<Vec<SceneSample>> {
    (0..n as u64)
        .map(|i| generate_scene(SceneKind::ALL[(i % 4) as usize], height, width, i))
        .collect()
}

/// Median, averaging the middle pair for even lengths. NaN on empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Baseline against adaptation on one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficacyRow {
    pub scene: usize,
    pub kind: SceneKind,
    pub baseline_mae: f64,
    pub adapted_mae: f64,
    /// `1 − adapted/baseline`.
    pub reduction: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub encoder_calls: u64,
}

pub fn efficacy(
    model: &DepthModel,
    scenes: &[(SceneSample, SparseObservation)],
    config: &AdaptConfig,
) -> Result<Vec<EfficacyRow>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, (scene, obs))| {
            let truth = sensor_truth(scene, obs);
            let base = zero_shot_baseline(model, &scene.image, obs)?.evaluate(&truth)?;
            let mut r = adapt(model, &scene.image, obs, config)?;
            let m = r.evaluate(&truth)?;
            let recs = &r.trace.records;
            // Loss of the returned map, which comes from the last iteration.
            let final_loss = crate::tto::sparse_loss(&r.aligned, obs, config.unnormalized)?;
            Ok(EfficacyRow {
                scene: i,
                kind: scene.kind,
                baseline_mae: base.mae,
                adapted_mae: m.mae,
                reduction: 1.0 - m.mae / base.mae,
                initial_loss: recs.first().map_or(final_loss, |x| x.loss),
                final_loss,
                encoder_calls: r.trace.encoder_call_count,
            })
        })
        .collect()
}

/// Population summary of one adaptation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub scenes: usize,
    /// Scenes that aborted on a numerical failure.
    pub failed: usize,
    pub median_mae: f64,
    pub mean_mae: f64,
    pub median_rmse: f64,
}

fn summarize(setting: String, results: Vec<Result<(f64, f64)>>) -> Result<AblationRow> {
    let mut mae = Vec::new();
    let mut rmse = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok((a, b)) => {
                mae.push(a);
                rmse.push(b);
            }
            Err(Error::NonFiniteLoss { .. } | Error::NonFinite(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let mean = if mae.is_empty() { f64::NAN } else { mae.iter().sum::<f64>() / mae.len() as f64 };
    Ok(AblationRow {
        setting,
        scenes: mae.len() + failed,
        failed,
        median_mae: median(&mae),
        mean_mae: mean,
        median_rmse: median(&rmse),
    })
}

fn run_one(model: &DepthModel, scene: &SceneSample, obs: &SparseObservation, cfg: &AdaptConfig) -> Result<(f64, f64)> {
    let mut r = adapt(model, &scene.image, obs, cfg)?;
    let m = r.evaluate(&sensor_truth(scene, obs))?;
    Ok((m.mae, m.rmse))
}

/// Adaptation with each feature projection, basis fitted per scene.
pub fn projection_ablation(
    model: &DepthModel,
    scenes: &[(SceneSample, SparseObservation)],
    specs: &[ProjectionSpec],
    base: &AdaptConfig,
) -> Result<Vec<AblationRow>> {
    specs
        .iter()
        .map(|spec| {
            let cfg = AdaptConfig {
                projection: Some(spec.clone()),
                ..base.clone()
            };
            let results = scenes.iter().map(|(s, o)| run_one(model, s, o, &cfg)).collect();
            summarize(spec.label(), results)
        })
        .collect()
}

/// Adaptation at each LoRA rank, `alpha = rank`.
pub fn rank_sweep(
    model: &DepthModel,
    scenes: &[(SceneSample, SparseObservation)],
    ranks: &[usize],
    base: &AdaptConfig,
) -> Result<Vec<AblationRow>> {
    ranks
        .iter()
        .map(|&rank| {
            let cfg = AdaptConfig {
                rank,
                alpha: None,
                ..base.clone()
            };
            let results = scenes.iter().map(|(s, o)| run_one(model, s, o, &cfg)).collect();
            summarize(format!("r{rank}"), results)
        })
        .collect()
}

/// The projection settings of the ablation table.
pub fn default_projection_labels() -> Vec<String> {
    ["none", "top_4", "top_8", "top_16", "orth_8", "orth_16", "rand_8", "rand_16"]
        .map(String::from)
        .to_vec()
}

pub const DEFAULT_RANKS: [usize; 5] = [2, 4, 8, 16, 32];

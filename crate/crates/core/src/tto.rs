//! Per-scene test-time optimization: encode once, then iterate decode, align,
//! sparse loss and a gradient step on the trainable parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{align_on_tape, fit_or_fallback, ScaleShift};
use crate::analysis::pca::{build_projector, ProjectionSpec};
use crate::autodiff::{FlopCount, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    fresh_adapters, BoundParams, DepthModel, FeatureCache, FeatureMap, FeatureProjector, ForwardTrace,
    LayerId, TrainableState,
};
use crate::tensor::Tensor;
use crate::world::{mae_rmse, SceneSample, SparseObservation};

/// Which parameters adapt and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    DecoderLora,
    EncoderLora,
    FullLora,
    DecoderFt,
    EncoderFt,
    FullFt,
}

impl Scope {
    pub const ALL: [Scope; 6] = [
        Scope::DecoderLora,
        Scope::EncoderLora,
        Scope::FullLora,
        Scope::DecoderFt,
        Scope::EncoderFt,
        Scope::FullFt,
    ];

    pub fn is_lora(self) -> bool {
        matches!(self, Scope::DecoderLora | Scope::EncoderLora | Scope::FullLora)
    }

    pub fn touches_encoder(self) -> bool {
        !matches!(self, Scope::DecoderLora | Scope::DecoderFt)
    }

    fn touches_decoder(self) -> bool {
        !matches!(self, Scope::EncoderLora | Scope::EncoderFt)
    }

    /// Layers adapted under this scope.
    pub fn layers(self, model: &DepthModel) -> Vec<LayerId> {
        let mut out = Vec::new();
        if self.touches_encoder() {
            out.extend(model.encoder_layer_ids());
        }
        if self.touches_decoder() {
            out.extend(model.decoder_layer_ids());
        }
        out
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::DecoderLora => "decoder_lora",
            Scope::EncoderLora => "encoder_lora",
            Scope::FullLora => "full_lora",
            Scope::DecoderFt => "decoder_ft",
            Scope::EncoderFt => "encoder_ft",
            Scope::FullFt => "full_ft",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scope `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub rank: usize,
    /// LoRA scaling numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
    pub scope: Scope,
    pub detach_alignment: bool,
    /// Sum the squared residuals instead of averaging them over Ω.
    pub unnormalized: bool,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    /// Reuse encoder features across iterations when the encoder is frozen.
    pub use_cache: bool,
    pub projection: Option<ProjectionSpec>,
    /// Keep every per-step gradient in the trace.
    pub record_gradients: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 40,
            learning_rate: 0.01,
            rank: 8,
            alpha: None,
            scope: Scope::DecoderLora,
            detach_alignment: false,
            unnormalized: false,
            momentum: 0.0,
            use_cache: true,
            projection: None,
            record_gradients: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid("alpha must be positive"));
            }
        }
        Ok(())
    }

    fn lora_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub loss: f64,
    pub a: f64,
    pub b: f64,
    pub fallback: bool,
}

/// Gradients of one layer's trainable tensors at one step: `(A, B)` for LoRA
/// layers, `(W, b)` for fine-tuned ones.
pub type StepGradients = BTreeMap<LayerId, (Tensor, Tensor)>;

#[derive(Clone, Debug, Default)]
pub struct AdaptTrace {
    pub records: Vec<IterationRecord>,
    pub encoder_call_count: u64,
    /// Effective weight change per adapted layer before the first step.
    pub initial_deltas: BTreeMap<LayerId, Tensor>,
    pub final_deltas: BTreeMap<LayerId, Tensor>,
    /// Initial LoRA factors, kept so updates can be replayed from the log.
    pub initial_adapters: BTreeMap<LayerId, crate::model::LoraAdapter>,
    pub gradients: Vec<StepGradients>,
    /// Forward/backward FLOPs summed over all iterations, encoder included.
    pub flops: FlopCount,
    /// Forward FLOPs of a single decode from cached features.
    pub decode_flops: u64,
    pub encoder_flops: u64,
    pub wall_seconds: f64,
    /// The zero-shot fit fell back to a mean offset.
    pub baseline_fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    /// `a·D̂ + b` on the full grid, in the sensor frame.
    pub aligned: Tensor,
    pub scale_shift: ScaleShift,
    pub metrics: Option<Metrics>,
    pub trace: AdaptTrace,
    /// Final trainable state (empty for the zero-shot path).
    pub state: TrainableState,
}

impl AdaptResult {
    /// Fills `metrics` against a dense reference map.
    pub fn evaluate(&mut self, truth: &Tensor) -> Result<Metrics> {
        let (mae, rmse) = mae_rmse(&self.aligned, truth, None)?;
        let m = Metrics { mae, rmse };
        self.metrics = Some(m);
        Ok(m)
    }
}

/// Ground truth mapped into the sensor frame, `a*·D + b*`.
pub fn sensor_truth(scene: &SceneSample, obs: &SparseObservation) -> Tensor {
    scene.depth.map(|d| obs.sensor_scale * d + obs.sensor_shift)
}

/// Mean (or, with `unnormalized`, summed) squared residual between an aligned
/// map and the measurements at Ω.
pub fn sparse_loss(aligned: &Tensor, obs: &SparseObservation, unnormalized: bool) -> Result<f64> {
    if aligned.rank() != 2 {
        return Err(Error::invalid("sparse loss expects an H×W map"));
    }
    obs.validate(aligned.shape()[0], aligned.shape()[1])?;
    let w = aligned.shape()[1];
    let sum: f64 = obs
        .omega
        .iter()
        .zip(&obs.values)
        .map(|(&(i, j), s)| (aligned.data()[i * w + j] - s).powi(2))
        .sum();
    Ok(if unnormalized { sum } else { sum / obs.len() as f64 })
}

/// Frozen prediction plus one least-squares alignment.
pub fn zero_shot_baseline(model: &DepthModel, image: &Tensor, obs: &SparseObservation) -> Result<AdaptResult> {
    adapt(
        model,
        image,
        obs,
        &AdaptConfig {
            iterations: 0,
            ..AdaptConfig::default()
        },
    )
}

/// Builds the per-scene projector for `spec` from the frozen decoder's stage features.
pub fn scene_projector(model: &DepthModel, features: &FeatureMap, spec: &ProjectionSpec) -> Result<Option<FeatureProjector>> {
    let (_, acts) = model.decode_traced(features, None, None)?;
    let stage = acts
        .stage_out
        .get(spec.stage)
        .ok_or_else(|| Error::invalid(format!("projection stage {} out of range", spec.stage)))?;
    build_projector(spec, &[stage])
}

/// Runs the adaptation loop; a projector in `config.projection` is fitted to this scene.
pub fn adapt(model: &DepthModel, image: &Tensor, obs: &SparseObservation, config: &AdaptConfig) -> Result<AdaptResult> {
    adapt_with_projector(model, image, obs, config, None)
}

/// As [`adapt`], with an explicit projector overriding `config.projection`
/// (for example one fitted to a population of scenes).
pub fn adapt_with_projector(
    model: &DepthModel,
    image: &Tensor,
    obs: &SparseObservation,
    config: &AdaptConfig,
    projector: Option<FeatureProjector>,
) -> Result<AdaptResult> {
    config.validate()?;
    if image.rank() != 3 {
        return Err(Error::invalid("image must be H×W×3"));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    obs.validate(h, w)?;
    let start = Instant::now();
    let calls_before = model.encode_calls();

    let layers = config.scope.layers(model);
    let mut state = TrainableState::default();
    if config.iterations > 0 {
        if config.scope.is_lora() {
            state.adapters = fresh_adapters(model, &layers, config.rank, config.lora_alpha(), config.seed)?;
        } else {
            for &id in &layers {
                state
                    .overrides
                    .insert(id, model.layer(id).expect("scope layers exist").clone());
            }
        }
    }

    let cache_ok = config.use_cache && !config.scope.touches_encoder();
    let mut cache = FeatureCache::new();
    let mut cached: Option<FeatureMap> = None;
    let need_features = cache_ok || config.iterations == 0 || (projector.is_none() && config.projection.is_some());
    if need_features {
        cached = Some(cache.get_or_encode(model, image)?.clone());
    }
    let projector = match (projector, &config.projection) {
        (Some(p), _) => Some(p),
        (None, Some(spec)) => scene_projector(model, cached.as_ref().expect("encoded above"), spec)?,
        (None, None) => None,
    };
    if !cache_ok && config.iterations > 0 {
        cached = None;
    }

    let omega = Arc::new(obs.flat_indices(w));
    let mut trace = AdaptTrace {
        initial_deltas: deltas(model, &state),
        initial_adapters: state.adapters.clone(),
        encoder_flops: model.encoder_flops(h, w)?,
        ..AdaptTrace::default()
    };
    let mut velocity: BTreeMap<LayerId, (Tensor, Tensor)> = BTreeMap::new();
    let mut last: Option<(Tensor, ScaleShift)> = None;

    for t in 0..config.iterations {
        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let mut ft = ForwardTrace::default();
        let depth = match &cached {
            Some(f) => {
                let fv = tape.leaf(f.features.clone());
                model.decoder_on_tape(&mut tape, fv, f.grid, (h, w), &state, projector.as_ref(), &mut bound, &mut ft)?
            }
            None => model.forward_on_tape(&mut tape, image, &state, projector.as_ref(), &mut bound, &mut ft)?,
        };
        let flat = tape.reshape(depth, &[h * w])?;
        let at = tape.gather(flat, omega.clone())?;
        let al = align_on_tape(&mut tape, at, &obs.values, config.detach_alignment)?;
        let target = tape.leaf(Tensor::vector(obs.values.clone()));
        let r = tape.sub(al.aligned, target)?;
        let sq = tape.square(r);
        let loss = if config.unnormalized { tape.sum(sq) } else { tape.mean(sq) };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        let ss = ScaleShift {
            a: tape.value(al.scale).item(),
            b: tape.value(al.shift).item(),
        };
        trace.records.push(IterationRecord {
            t,
            loss: value,
            a: ss.a,
            b: ss.b,
            fallback: al.fallback,
        });
        if t == 0 && cached.is_some() {
            trace.decode_flops = tape.flops().forward;
        }
        let pred = tape.value(depth).clone();
        let grads = tape.backward(loss)?;
        let f = tape.flops();
        trace.flops.forward += f.forward;
        trace.flops.backward += f.backward;

        let step = collect_gradients(&grads, &bound)?;
        apply_step(&mut state, &step, &mut velocity, config)?;
        if config.record_gradients {
            trace.gradients.push(step);
        }
        last = Some((ss.apply(&pred), ss));
    }

    let (aligned, scale_shift) = match last {
        Some(x) => x,
        None => {
            let f = cached.as_ref().expect("encoded for the zero-shot path");
            let (pred, acts) = model.decode_traced(f, None, projector.as_ref())?;
            trace.decode_flops = acts.flops.forward;
            trace.flops.forward += acts.flops.forward;
            let pred_at: Vec<f64> = omega.iter().map(|&k| pred.data()[k]).collect();
            let (ss, fallback) = fit_or_fallback(&pred_at, &obs.values)?;
            trace.baseline_fallback = fallback;
            (ss.apply(&pred), ss)
        }
    };
    trace.encoder_call_count = model.encode_calls() - calls_before;
    if need_features {
        trace.flops.forward += trace.encoder_flops;
    }
    trace.final_deltas = deltas(model, &state);
    trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok(AdaptResult {
        aligned,
        scale_shift,
        metrics: None,
        trace,
        state,
    })
}

fn deltas(model: &DepthModel, state: &TrainableState) -> BTreeMap<LayerId, Tensor> {
    let mut out: BTreeMap<LayerId, Tensor> = state
        .adapters
        .iter()
        .map(|(&id, ad)| (id, ad.effective_delta()))
        .collect();
    for (&id, l) in &state.overrides {
        let base = &model.layer(id).expect("override of a known layer").weight;
        out.insert(id, l.weight.sub(base).expect("same shape"));
    }
    out
}

fn collect_gradients(grads: &crate::autodiff::Gradients, bound: &BoundParams) -> Result<StepGradients> {
    let pick = |v: Var| {
        grads
            .get(v)
            .cloned()
            .ok_or_else(|| Error::invalid("trainable parameter received no gradient"))
    };
    let mut out = BTreeMap::new();
    for (&id, &(a, b)) in bound.lora.iter().chain(&bound.full) {
        out.insert(id, (pick(a)?, pick(b)?));
    }
    Ok(out)
}

fn apply_step(
    state: &mut TrainableState,
    step: &StepGradients,
    velocity: &mut BTreeMap<LayerId, (Tensor, Tensor)>,
    config: &AdaptConfig,
) -> Result<()> {
    for (&id, (g0, g1)) in step {
        let (d0, d1) = if config.momentum > 0.0 {
            let v = velocity
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g0.shape()), Tensor::zeros(g1.shape())));
            v.0 = v.0.scaled(config.momentum).add(g0)?;
            v.1 = v.1.scaled(config.momentum).add(g1)?;
            (v.0.clone(), v.1.clone())
        } else {
            (g0.clone(), g1.clone())
        };
        let (p0, p1) = if let Some(ad) = state.adapters.get_mut(&id) {
            (&mut ad.a, &mut ad.b)
        } else if let Some(l) = state.overrides.get_mut(&id) {
            (&mut l.weight, &mut l.bias)
        } else {
            return Err(Error::invalid(format!("gradient for untracked layer {id}")));
        };
        *p0 = p0.sub(&d0.scaled(config.learning_rate))?;
        *p1 = p1.sub(&d1.scaled(config.learning_rate))?;
    }
    Ok(())
}

/// One row of the adaptation-scope comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopeRow {
    pub scope: Scope,
    pub iterations: usize,
    pub learning_rate: f64,
    pub scenes_ok: usize,
    pub scenes_failed: usize,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub mean_encoder_calls: f64,
    pub mean_flops: f64,
    /// Some scene aborted on a non-finite loss.
    pub unstable: bool,
}

/// Mean metrics per configuration over `scenes`; failing scenes are skipped
/// and counted.
pub fn scope_sweep(
    model: &DepthModel,
    scenes: &[(SceneSample, SparseObservation)],
    configs: &[AdaptConfig],
) -> Result<Vec<ScopeRow>> {
    configs
        .iter()
        .map(|cfg| {
            let (mut mae, mut rmse, mut calls, mut flops) = (0.0, 0.0, 0.0, 0.0);
            let (mut ok, mut failed, mut unstable) = (0, 0, false);
            for (scene, obs) in scenes {
                match adapt(model, &scene.image, obs, cfg) {
                    Ok(mut r) => {
                        let m = r.evaluate(&sensor_truth(scene, obs))?;
                        mae += m.mae;
                        rmse += m.rmse;
                        calls += r.trace.encoder_call_count as f64;
                        flops += (r.trace.flops.forward + r.trace.flops.backward) as f64;
                        ok += 1;
                    }
                    Err(Error::NonFiniteLoss { .. } | Error::NonFinite(_)) => {
                        failed += 1;
                        unstable = true;
                    }
                    Err(_) => failed += 1,
                }
            }
            let n = ok.max(1) as f64;
            let nan_if_empty = |x: f64| if ok == 0 { f64::NAN } else { x / n };
            Ok(ScopeRow {
                scope: cfg.scope,
                iterations: cfg.iterations,
                learning_rate: cfg.learning_rate,
                scenes_ok: ok,
                scenes_failed: failed,
                mean_mae: nan_if_empty(mae),
                mean_rmse: nan_if_empty(rmse),
                mean_encoder_calls: nan_if_empty(calls),
                mean_flops: nan_if_empty(flops),
                unstable,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{generate_scene, sample_sparse, SceneKind};

    fn setup(seed: u64) -> (DepthModel, SceneSample, SparseObservation) {
        let model = DepthModel::init(ModelConfig::default(), seed).unwrap();
        let scene = generate_scene(SceneKind::Mixed, 32, 32, seed + 1).unwrap();
        let obs = sample_sparse(&scene, 100, 1.25, 0.4, 0.01, seed + 2).unwrap();
        (model, scene, obs)
    }

    fn short(iterations: usize) -> AdaptConfig {
        AdaptConfig {
            iterations,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn exact_affine_targets_are_a_fixed_point() {
        let (model, scene, mut obs) = setup(1);
        let f = model.encode(&scene.image).unwrap();
        let pred = model.decode(&f, None, None).unwrap();
        let w = pred.shape()[1];
        obs.values = obs.omega.iter().map(|&(i, j)| 2.0 * pred.data()[i * w + j] + 1.0).collect();
        let r = adapt(&model, &scene.image, &obs, &short(10)).unwrap();
        for rec in &r.trace.records {
            assert!(rec.loss < 1e-20, "{rec:?}");
        }
        for d in r.trace.final_deltas.values() {
            assert!(d.max_abs() < 1e-12);
        }
        assert!((r.scale_shift.a - 2.0).abs() < 1e-9 && (r.scale_shift.b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cached_and_reencoded_runs_match_bitwise() {
        let (model, scene, obs) = setup(2);
        let cached = adapt(&model, &scene.image, &obs, &short(40)).unwrap();
        let fresh = adapt(
            &model,
            &scene.image,
            &obs,
            &AdaptConfig {
                use_cache: false,
                ..short(40)
            },
        )
        .unwrap();
        assert_eq!(cached.trace.encoder_call_count, 1);
        assert_eq!(fresh.trace.encoder_call_count, 40);
        let bits = |r: &AdaptResult| r.trace.records.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&cached), bits(&fresh));
        assert_eq!(cached.aligned, fresh.aligned);
    }

    #[test]
    fn adaptation_leaves_encoder_untouched() {
        let (model, scene, obs) = setup(3);
        let before = model.encoder_digest();
        adapt(&model, &scene.image, &obs, &short(5)).unwrap();
        assert_eq!(model.encoder_digest(), before);
    }

    #[test]
    fn update_is_replayable_from_logged_gradients() {
        let (model, scene, obs) = setup(4);
        let cfg = AdaptConfig {
            record_gradients: true,
            ..short(15)
        };
        let r = adapt(&model, &scene.image, &obs, &cfg).unwrap();
        assert_eq!(r.trace.gradients.len(), 15);
        let mut adapters = r.trace.initial_adapters.clone();
        for step in &r.trace.gradients {
            for (id, (ga, gb)) in step {
                let ad = adapters.get_mut(id).unwrap();
                ad.a = ad.a.sub(&ga.scaled(cfg.learning_rate)).unwrap();
                ad.b = ad.b.sub(&gb.scaled(cfg.learning_rate)).unwrap();
            }
        }
        for (id, ad) in &adapters {
            let diff = ad.effective_delta().sub(&r.trace.final_deltas[id]).unwrap();
            assert!(diff.max_abs() < 1e-8, "{id}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (model, scene, obs) = setup(5);
        let a = adapt(&model, &scene.image, &obs, &short(10)).unwrap();
        let b = adapt(&model, &scene.image, &obs, &short(10)).unwrap();
        assert_eq!(a.aligned, b.aligned);
        assert_eq!(a.trace.records, b.trace.records);
    }

    #[test]
    fn zero_iterations_is_the_baseline() {
        let (model, scene, obs) = setup(6);
        let r = adapt(&model, &scene.image, &obs, &short(0)).unwrap();
        let z = zero_shot_baseline(&model, &scene.image, &obs).unwrap();
        assert!(r.trace.records.is_empty());
        assert!(r.state.is_empty());
        assert_eq!(r.aligned, z.aligned);
        assert_eq!(r.trace.encoder_call_count, 1);
    }

    #[test]
    fn encoder_scopes_reencode_every_step() {
        let (model, scene, obs) = setup(7);
        let cfg = AdaptConfig {
            scope: Scope::EncoderLora,
            ..short(3)
        };
        let r = adapt(&model, &scene.image, &obs, &cfg).unwrap();
        assert_eq!(r.trace.encoder_call_count, 3);
        assert!(r.state.adapters.keys().all(|l| matches!(l, LayerId::Encoder(_))));
    }

    #[test]
    fn loss_is_mean_over_omega_unless_unnormalized() {
        let (model, scene, obs) = setup(8);
        let mean = adapt(&model, &scene.image, &obs, &short(1)).unwrap();
        let sum = adapt(
            &model,
            &scene.image,
            &obs,
            &AdaptConfig {
                unnormalized: true,
                ..short(1)
            },
        )
        .unwrap();
        let ratio = sum.trace.records[0].loss / mean.trace.records[0].loss;
        assert!((ratio - obs.len() as f64).abs() < 1e-9);
        let direct = sparse_loss(&mean.aligned, &obs, false).unwrap();
        assert!((direct - mean.trace.records[0].loss).abs() < 1e-12);
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("decoder".parse::<Scope>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (model, scene, obs) = setup(9);
        for cfg in [
            AdaptConfig { learning_rate: 0.0, ..short(1) },
            AdaptConfig { rank: 0, ..short(1) },
            AdaptConfig { momentum: 1.0, ..short(1) },
        ] {
            assert!(matches!(adapt(&model, &scene.image, &obs, &cfg), Err(Error::InvalidArgument(_))));
        }
    }
}

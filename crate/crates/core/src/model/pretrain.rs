//! Offline pretraining of the synthetic foundation model on RGB → depth with a
//! scale–shift-invariant loss. The resulting model has good relative depth
//! but no notion of metric scale.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BoundParams, DepthModel, ForwardTrace, LayerId, ModelConfig, TrainableState};
use crate::alignment::{align_on_tape, fit_pairs};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::{rng_for, SceneSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of `(a − 1)²` on the fitted dense scale, added to the invariant
    /// loss; keeps the prediction's spread near metric so alignment stays well
    /// conditioned and the sign of the relief fixed.
    pub anchor_weight: f64,
    /// Weight of the plain unaligned MSE after warm-up.
    pub metric_weight: f64,
    /// Leading epochs trained on plain MSE alone. The invariant loss is blind
    /// to the sign of the relief, and this fixes it before that loss takes over.
    pub warmup_epochs: usize,
    /// Global gradient-norm ceiling per batch; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            learning_rate: 1.5e-3,
            batch_size: 8,
            anchor_weight: 1.0,
            metric_weight: 0.0,
            warmup_epochs: 2,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean scale–shift-invariant loss per epoch.
    pub epoch_loss: Vec<f64>,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Training loss of one scene: `weights` scale the invariant error, the
/// `(a − 1)²` anchor and the plain MSE. Returns the invariant error, the
/// weighted total and gradients for every layer in `state.overrides`.
fn scene_loss(
    model: &DepthModel,
    state: &TrainableState,
    scene: &SceneSample,
    weights: [f64; 3],
) -> Result<(f64, f64, BTreeMap<LayerId, (Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let mut bound = BoundParams::default();
    let depth = model.forward_on_tape(&mut tape, &scene.image, state, None, &mut bound, &mut ForwardTrace::default())?;
    let n = scene.depth.len();
    let flat = tape.reshape(depth, &[n])?;
    let al = align_on_tape(&mut tape, flat, scene.depth.data(), false)?;
    let target = tape.leaf(Tensor::vector(scene.depth.data().to_vec()));
    let r = tape.sub(al.aligned, target)?;
    let sq = tape.square(r);
    let invariant = tape.mean(sq);
    let value = tape.value(invariant).item();
    let [invariant_weight, anchor_weight, metric_weight] = weights;
    let mut loss = tape.scale(invariant, invariant_weight);
    if anchor_weight > 0.0 {
        let one = tape.leaf(Tensor::scalar(1.0));
        let da = tape.sub(al.scale, one)?;
        let da2 = tape.square(da);
        let anchor = tape.scale(da2, anchor_weight);
        loss = tape.add(loss, anchor)?;
    }
    if metric_weight > 0.0 {
        let raw = tape.sub(flat, target)?;
        let raw_sq = tape.square(raw);
        let raw_mse = tape.mean(raw_sq);
        let metric = tape.scale(raw_mse, metric_weight);
        loss = tape.add(loss, metric)?;
    }
    let total = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = bound
        .full
        .iter()
        .map(|(&id, &(w, b))| {
            let gw = grads.get(w).cloned().expect("registered");
            let gb = grads.get(b).cloned().expect("registered");
            (id, (gw, gb))
        })
        .collect();
    Ok((value, total, out))
}

/// Trains every layer of a freshly initialized model on `population` with Adam
/// and returns the frozen result. Deterministic in `cfg.seed`.
pub fn pretrain(
    config: ModelConfig,
    population: &[SceneSample],
    cfg: &PretrainConfig,
) -> Result<(DepthModel, PretrainReport)> {
    if population.is_empty() {
        return Err(Error::invalid("pretraining population is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = DepthModel::init(config, cfg.seed)?;
    let ids: Vec<LayerId> = model
        .encoder_layer_ids()
        .into_iter()
        .chain(model.decoder_layer_ids())
        .collect();
    let mut adam = Adam {
        m: Vec::new(),
        v: Vec::new(),
        step: 0,
    };
    for id in &ids {
        let l = model.layer(*id).expect("listed");
        for t in [&l.weight, &l.bias] {
            adam.m.push(Tensor::zeros(t.shape()));
            adam.v.push(Tensor::zeros(t.shape()));
        }
    }

    let mut rng = rng_for(cfg.seed, 0x9e7a);
    let mut order: Vec<usize> = (0..population.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Cosine decay to zero over the run.
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let weights = if epoch < cfg.warmup_epochs {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, cfg.anchor_weight, cfg.metric_weight]
        };
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let state = TrainableState {
                adapters: BTreeMap::new(),
                overrides: ids
                    .iter()
                    .map(|&id| (id, model.layer(id).expect("listed").clone()))
                    .collect(),
            };
            let mut acc: Vec<Tensor> = adam.m.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &k in batch {
                let (loss, _, grads) = scene_loss(&model, &state, &population[k], weights)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                total += loss;
                let flat = ids.iter().flat_map(|id| {
                    let (gw, gb) = &grads[id];
                    [gw, gb]
                });
                for (a, g) in acc.iter_mut().zip(flat) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, g)| *a += g / batch.len() as f64);
                }
            }
            let norm = acc.iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= k));
            }
            let mut params: Vec<&mut Tensor> = Vec::new();
            let (enc, rest) = (&mut model.encoder, (&mut model.stages, &mut model.head));
            for l in enc.iter_mut().chain(rest.0.iter_mut()).chain(std::iter::once(rest.1)) {
                params.push(&mut l.weight);
                params.push(&mut l.bias);
            }
            adam.update(&mut params, &acc, lr);
        }
        let mean = total / population.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epoch_loss.push(mean);
    }
    Ok((model, PretrainReport { epoch_loss }))
}

/// Dense scale–shift-aligned RMSE of the frozen model against the
/// predict-the-median baseline, averaged over `scenes`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub model_rmse: f64,
    pub median_baseline_rmse: f64,
}

pub fn aligned_rmse_report(model: &DepthModel, scenes: &[SceneSample]) -> Result<RmseReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("no validation scenes"));
    }
    let (mut model_sum, mut base_sum) = (0.0, 0.0);
    for s in scenes {
        let f = model.encode(&s.image)?;
        let pred = model.decode(&f, None, None)?;
        let truth = s.depth.data();
        let ss = fit_pairs(pred.data(), truth)?;
        let mse = pred
            .data()
            .iter()
            .zip(truth)
            .map(|(p, t)| (ss.a * p + ss.b - t).powi(2))
            .sum::<f64>()
            / truth.len() as f64;
        model_sum += mse.sqrt();
        let mut sorted = truth.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let base = truth.iter().map(|t| (t - median).powi(2)).sum::<f64>() / truth.len() as f64;
        base_sum += base.sqrt();
    }
    let n = scenes.len() as f64;
    Ok(RmseReport {
        model_rmse: model_sum / n,
        median_baseline_rmse: base_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, SceneKind};

    fn full_state(model: &DepthModel) -> (Vec<LayerId>, TrainableState) {
        let ids: Vec<LayerId> = model
            .encoder_layer_ids()
            .into_iter()
            .chain(model.decoder_layer_ids())
            .collect();
        let overrides = ids.iter().map(|&id| (id, model.layer(id).unwrap().clone())).collect();
        (
            ids,
            TrainableState {
                adapters: BTreeMap::new(),
                overrides,
            },
        )
    }

    #[test]
    fn scene_loss_gradient_matches_finite_differences() {
        let model = DepthModel::init(ModelConfig::default(), 1).unwrap();
        let scene = generate_scene(SceneKind::Mixed, 16, 16, 2).unwrap();
        let (ids, state) = full_state(&model);
        let (_, _, grads) = scene_loss(&model, &state, &scene, [1.0, 0.1, 0.1]).unwrap();
        for id in ids {
            for (which, k) in [(0, 0usize), (0, 7), (0, 19), (1, 0), (1, 5)] {
                let probe = |delta: f64| {
                    let mut s = state.clone();
                    let l = s.overrides.get_mut(&id).unwrap();
                    let w = if which == 0 { &mut l.weight } else { &mut l.bias };
                    let k = k % w.len();
                    w.data_mut()[k] += delta;
                    scene_loss(&model, &s, &scene, [1.0, 0.1, 0.1]).unwrap().1
                };
                let h = 1e-6;
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let gw = if which == 0 { &grads[&id].0 } else { &grads[&id].1 };
                let an = gw.data()[k % gw.len()];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7,
                    "{id} entry {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}

//! The synthetic depth foundation model: a frozen patch encoder and a
//! per-pixel decoder whose linear stages can carry LoRA adapters.
//!
//! Feature maps are `[positions, channels]` matrices. The encoder turns a
//! `H × W × 3` image into a `(H/p)·(W/p) × C_enc` map; the decoder runs one
//! linear+ReLU stage per resolution level, doubling the grid between stages
//! until it reaches the image size, and finishes with a linear head whose
//! output is a clamped log-depth.

mod io;
mod lora;
mod pretrain;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{FlopCount, Tape, Var};
use crate::error::{Error, Result};
use crate::spatial::SpatialOp;
use crate::tensor::Tensor;
use crate::world::{DEPTH_MAX, DEPTH_MIN};

pub use io::{load_weights, read_weights, save_weights, write_weights};
pub use lora::{effective_delta, LoraAdapter};
pub use pretrain::{aligned_rmse_report, pretrain, PretrainConfig, PretrainReport, RmseReport};

/// Lower bound of the predicted depth.
pub const OUTPUT_MIN: f64 = DEPTH_MIN / 4.0;
/// Upper bound of the predicted depth.
pub const OUTPUT_MAX: f64 = DEPTH_MAX * 4.0;

/// A dense layer `y = x Wᵀ + b` applied per spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `C_out × C_in`.
    pub weight: Tensor,
    /// `C_out`.
    pub bias: Tensor,
}

impl Linear {
    fn init(c_in: usize, c_out: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("positive std");
        let w = (0..c_in * c_out).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::matrix(c_out, c_in, w).expect("sized"),
            bias: Tensor::full(&[c_out], bias),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn c_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Identifies one linear layer of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Encoder(usize),
    /// Decoder stage; index `L` (one past the last stage) is the head.
    Decoder(usize),
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "enc{i}"),
            LayerId::Decoder(i) => write!(f, "dec{i}"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad layer id `{s}`")))
        };
        if let Some(rest) = s.strip_prefix("enc") {
            Ok(LayerId::Encoder(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("dec") {
            Ok(LayerId::Decoder(parse(rest)?))
        } else {
            Err(Error::invalid(format!("bad layer id `{s}`")))
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Output widths of the encoder layers; the last is `C_enc`.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the decoder stages; the head maps the last to 1.
    pub decoder_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 4,
            encoder_widths: vec![64, 160, 160, 32],
            decoder_widths: vec![32, 16, 16, 8],
        }
    }
}

/// Encoder output: a `[positions, C_enc]` map on a `grid_h × grid_w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub features: Tensor,
    pub grid: (usize, usize),
}

impl FeatureMap {
    /// `(H/p, W/p, C_enc)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid.0, self.grid.1, self.features.cols())
    }
}

/// Digest of an image, used to key the feature cache.
pub fn image_digest(image: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in image.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Encoder features computed once per image and reused across iterations.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    entry: Option<([u8; 32], FeatureMap)>,
}

impl FeatureCache {
    pub fn new() -> Self {
        FeatureCache::default()
    }

    /// Cached features when the image digest matches, otherwise a fresh encode.
    pub fn get_or_encode(&mut self, model: &DepthModel, image: &Tensor) -> Result<&FeatureMap> {
        let digest = image_digest(image);
        let hit = matches!(&self.entry, Some((d, _)) if *d == digest);
        if !hit {
            let f = model.encode(image)?;
            self.entry = Some((digest, f));
        }
        Ok(&self.entry.as_ref().expect("filled above").1)
    }

    pub fn source_hash(&self) -> Option<[u8; 32]> {
        self.entry.as_ref().map(|(d, _)| *d)
    }
}

/// Fixed affine projection `x ↦ x·Q + c` applied to the output of one decoder
/// stage before the next stage. `Q` is `C × C`, `c` has length `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjector {
    pub stage: usize,
    pub matrix: Tensor,
    pub offset: Tensor,
}

/// Session-local trainable state layered over the frozen model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainableState {
    pub adapters: BTreeMap<LayerId, LoraAdapter>,
    /// Fully fine-tuned replacements for frozen layers.
    pub overrides: BTreeMap<LayerId, Linear>,
}

impl TrainableState {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty() && self.overrides.is_empty()
    }

    fn touches_encoder(&self) -> bool {
        self.adapters
            .keys()
            .chain(self.overrides.keys())
            .any(|l| matches!(l, LayerId::Encoder(_)))
    }
}

/// Tape handles of the trainable parameters registered during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    /// `(A, B)` per adapted layer.
    pub lora: BTreeMap<LayerId, (Var, Var)>,
    /// `(W, b)` per fine-tuned layer.
    pub full: BTreeMap<LayerId, (Var, Var)>,
}

/// Tape handles produced by a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Post-activation output of each encoder layer.
    pub encoder_layers: Vec<Var>,
    /// Encoder output features.
    pub features: Option<Var>,
    /// Pre-activation of each decoder stage.
    pub stage_pre: Vec<Var>,
    /// Post-activation (and post-projection) output of each decoder stage.
    pub stage_out: Vec<Var>,
    /// Spatial grid of each decoder stage.
    pub stage_grid: Vec<(usize, usize)>,
    /// Head output before clamping (log-depth).
    pub head: Option<Var>,
    /// Depth map `[H, W]`.
    pub depth: Option<Var>,
}

/// The frozen encoder/decoder pair.
#[derive(Debug)]
pub struct DepthModel {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    pub stages: Vec<Linear>,
    pub head: Linear,
    encode_calls: AtomicU64,
}

impl Clone for DepthModel {
    fn clone(&self) -> Self {
        DepthModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
            encode_calls: AtomicU64::new(0),
        }
    }
}

impl PartialEq for DepthModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.encoder == other.encoder
            && self.stages == other.stages
            && self.head == other.head
    }
}

impl DepthModel {
    /// Randomly initialized (untrained) model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.patch_size == 0 || config.encoder_widths.is_empty() || config.decoder_widths.is_empty() {
            return Err(Error::invalid("model needs a patch size, encoder and decoder widths"));
        }
        let mut rng = crate::world::rng_for(seed, 0x30de1);
        let mut c_in = 3 * config.patch_size * config.patch_size;
        let mut encoder = Vec::new();
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(Linear::init(c_in, w, 0.0, &mut rng));
            // the first layer's output is joined with its smoothed copy
            c_in = if i == 0 { 2 * w } else { w };
        }
        let mut stages = Vec::new();
        for &w in &config.decoder_widths {
            stages.push(Linear::init(c_in, w, 0.0, &mut rng));
            c_in = w;
        }
        let mut head = Linear::init(c_in, 1, 3.0f64.ln(), &mut rng);
        head.weight = head.weight.scaled(0.1);
        Ok(DepthModel {
            config,
            encoder,
            stages,
            head,
            encode_calls: AtomicU64::new(0),
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, encoder: Vec<Linear>, stages: Vec<Linear>, head: Linear) -> Self {
        DepthModel {
            config,
            encoder,
            stages,
            head,
            encode_calls: AtomicU64::new(0),
        }
    }

    /// Number of decoder stages `L`; `LayerId::Decoder(L)` is the head.
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn layer(&self, id: LayerId) -> Option<&Linear> {
        match id {
            LayerId::Encoder(i) => self.encoder.get(i),
            LayerId::Decoder(i) if i == self.stages.len() => Some(&self.head),
            LayerId::Decoder(i) => self.stages.get(i),
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut Linear> {
        match id {
            LayerId::Encoder(i) => self.encoder.get_mut(i),
            LayerId::Decoder(i) if i == self.stages.len() => Some(&mut self.head),
            LayerId::Decoder(i) => self.stages.get_mut(i),
        }
    }

    pub fn encoder_layer_ids(&self) -> Vec<LayerId> {
        (0..self.encoder.len()).map(LayerId::Encoder).collect()
    }

    /// All decoder linear maps: every stage plus the head.
    pub fn decoder_layer_ids(&self) -> Vec<LayerId> {
        (0..=self.stages.len()).map(LayerId::Decoder).collect()
    }

    /// Width `C_enc` of the encoder output.
    pub fn feature_channels(&self) -> usize {
        let last = self.encoder.last().map(Linear::c_out).unwrap_or(0);
        if self.encoder.len() == 1 { 2 * last } else { last }
    }

    /// Total encoder invocations since construction.
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    /// SHA-256 over all encoder weights.
    pub fn encoder_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.encoder {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        match image.shape() {
            [h, w, 3] if h % p == 0 && w % p == 0 && *h > 0 && *w > 0 => Ok((*h, *w)),
            [h, w, 3] => Err(Error::invalid(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            ))),
            other => Err(Error::Shape {
                op: "encode",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 3],
            }),
        }
    }

    /// Rearranges `[H, W, 3]` into `[patches, 3·p²]`, centering intensities at 0.
    pub fn patchify(&self, image: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (h, w) = self.check_image(image)?;
        let p = self.config.patch_size;
        let (gh, gw) = (h / p, w / p);
        let d = image.data();
        let mut out = Vec::with_capacity(h * w * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        let base = ((gy * p + y) * w + gx * p + x) * 3;
                        out.extend(d[base..base + 3].iter().map(|v| v - 0.5));
                    }
                }
            }
        }
        Ok((Tensor::matrix(gh * gw, 3 * p * p, out)?, (gh, gw)))
    }

    /// Frozen encoder forward, `f = e(I)`. Increments the encoder-call counter.
    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        let (f, _) = self.encode_traced(image)?;
        Ok(f)
    }

    /// Encoder forward returning every layer's output and the FLOP count.
    pub fn encode_traced(&self, image: &Tensor) -> Result<(FeatureMap, Vec<Tensor>)> {
        let (patches, grid) = self.patchify(image)?;
        let mut tape = Tape::new();
        let x = tape.leaf(patches);
        let mut trace = ForwardTrace::default();
        let feat = self.encoder_on_tape(
            &mut tape,
            x,
            grid,
            &TrainableState::default(),
            &mut BoundParams::default(),
            &mut trace,
        )?;
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let layers = trace
            .encoder_layers
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();
        Ok((
            FeatureMap {
                features: tape.value(feat).clone(),
                grid,
            },
            layers,
        ))
    }

    /// FLOPs of one frozen encoder forward on an `h × w` image.
    pub fn encoder_flops(&self, h: usize, w: usize) -> Result<u64> {
        let image = Tensor::zeros(&[h, w, 3]);
        let (patches, grid) = self.patchify(&image)?;
        let mut tape = Tape::new();
        let x = tape.leaf(patches);
        self.encoder_on_tape(
            &mut tape,
            x,
            grid,
            &TrainableState::default(),
            &mut BoundParams::default(),
            &mut ForwardTrace::default(),
        )?;
        Ok(tape.flops().forward)
    }

    /// Records one linear layer, binding trainable parameters from `state`.
    fn linear_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        id: LayerId,
        state: &TrainableState,
        bound: &mut BoundParams,
    ) -> Result<Var> {
        let base = self
            .layer(id)
            .ok_or_else(|| Error::invalid(format!("no layer {id}")))?;
        let (w, b) = match state.overrides.get(&id) {
            Some(ft) => {
                if ft.weight.shape() != base.weight.shape() || ft.bias.shape() != base.bias.shape() {
                    return Err(Error::Shape {
                        op: "override",
                        lhs: ft.weight.shape().to_vec(),
                        rhs: base.weight.shape().to_vec(),
                    });
                }
                let w = tape.param(ft.weight.clone());
                let b = tape.param(ft.bias.clone());
                bound.full.insert(id, (w, b));
                (w, b)
            }
            None => (tape.leaf(base.weight.clone()), tape.leaf(base.bias.clone())),
        };
        let wt = tape.transpose(w)?;
        let xw = tape.matmul(x, wt)?;
        let mut y = tape.add(xw, b)?;
        if let Some(ad) = state.adapters.get(&id) {
            if ad.c_in() != base.c_in() || ad.c_out() != base.c_out() {
                return Err(Error::Shape {
                    op: "lora",
                    lhs: vec![ad.c_out(), ad.c_in()],
                    rhs: base.weight.shape().to_vec(),
                });
            }
            let a = tape.param(ad.a.clone());
            let bb = tape.param(ad.b.clone());
            bound.lora.insert(id, (a, bb));
            let at = tape.transpose(a)?;
            let bt = tape.transpose(bb)?;
            let xa = tape.matmul(x, at)?;
            let xab = tape.matmul(xa, bt)?;
            let delta = tape.scale(xab, ad.scaling());
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// Encoder forward on `tape` from patchified input.
    pub fn encoder_on_tape(
        &self,
        tape: &mut Tape,
        patches: Var,
        grid: (usize, usize),
        state: &TrainableState,
        bound: &mut BoundParams,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let blur = Arc::new(SpatialOp::smooth3(grid));
        let mut x = patches;
        for i in 0..self.encoder.len() {
            let pre = self.linear_on_tape(tape, x, LayerId::Encoder(i), state, bound)?;
            x = tape.relu(pre);
            trace.encoder_layers.push(x);
            if i == 0 {
                let smooth = tape.spatial(x, blur.clone())?;
                x = tape.concat_cols(x, smooth)?;
            }
        }
        trace.features = Some(x);
        Ok(x)
    }

    /// Decoder forward on `tape`; returns the `[H, W]` depth map.
    pub fn decoder_on_tape(
        &self,
        tape: &mut Tape,
        features: Var,
        grid: (usize, usize),
        out_hw: (usize, usize),
        state: &TrainableState,
        projector: Option<&FeatureProjector>,
        bound: &mut BoundParams,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let c_enc = self.feature_channels();
        let fv = tape.value(features);
        if fv.rank() != 2 || fv.rows() != grid.0 * grid.1 || fv.cols() != c_enc {
            return Err(Error::Shape {
                op: "decode",
                lhs: fv.shape().to_vec(),
                rhs: vec![grid.0 * grid.1, c_enc],
            });
        }
        if let Some(p) = projector {
            if p.stage >= self.stages.len() {
                return Err(Error::invalid(format!("projection stage {} out of range", p.stage)));
            }
        }
        let mut x = features;
        let mut hw = grid;
        for i in 0..self.stages.len() {
            if i > 0 && (hw.0 < out_hw.0 || hw.1 < out_hw.1) {
                let next = ((2 * hw.0).min(out_hw.0), (2 * hw.1).min(out_hw.1));
                x = tape.spatial(x, Arc::new(SpatialOp::bilinear(hw, next)))?;
                hw = next;
            }
            let pre = self.linear_on_tape(tape, x, LayerId::Decoder(i), state, bound)?;
            trace.stage_pre.push(pre);
            x = tape.relu(pre);
            if let Some(p) = projector.filter(|p| p.stage == i) {
                let c = tape.value(x).cols();
                if p.matrix.shape() != [c, c] || p.offset.shape() != [c] {
                    return Err(Error::Shape {
                        op: "projection",
                        lhs: p.matrix.shape().to_vec(),
                        rhs: vec![c, c],
                    });
                }
                let q = tape.leaf(p.matrix.clone());
                let off = tape.leaf(p.offset.clone());
                let xq = tape.matmul(x, q)?;
                x = tape.add(xq, off)?;
            }
            trace.stage_out.push(x);
            trace.stage_grid.push(hw);
        }
        if hw != out_hw {
            x = tape.spatial(x, Arc::new(SpatialOp::bilinear(hw, out_hw)))?;
        }
        let head = self.linear_on_tape(tape, x, LayerId::Decoder(self.stages.len()), state, bound)?;
        trace.head = Some(head);
        let clamped = tape.clamp(head, OUTPUT_MIN.ln(), OUTPUT_MAX.ln());
        let depth = tape.exp(clamped);
        let depth = tape.reshape(depth, &[out_hw.0, out_hw.1])?;
        trace.depth = Some(depth);
        Ok(depth)
    }

    /// Full forward `d(e(I))` on one tape, encoder included. Used when the
    /// trainable state touches the encoder or caching is disabled.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        state: &TrainableState,
        projector: Option<&FeatureProjector>,
        bound: &mut BoundParams,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let (patches, grid) = self.patchify(image)?;
        let x = tape.leaf(patches);
        let f = self.encoder_on_tape(tape, x, grid, state, bound, trace)?;
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let out_hw = (image.shape()[0], image.shape()[1]);
        self.decoder_on_tape(tape, f, grid, out_hw, state, projector, bound, trace)
    }

    /// Output size of the decoder for a feature grid.
    pub fn output_hw(&self, grid: (usize, usize)) -> (usize, usize) {
        let p = self.config.patch_size;
        (grid.0 * p, grid.1 * p)
    }

    /// Decoder forward `D̂ = d(f)` with optional adapters and projection.
    pub fn decode(
        &self,
        features: &FeatureMap,
        state: Option<&TrainableState>,
        projector: Option<&FeatureProjector>,
    ) -> Result<Tensor> {
        let (depth, _) = self.decode_traced(features, state, projector)?;
        Ok(depth)
    }

    /// Decoder forward returning per-stage activations alongside the depth.
    pub fn decode_traced(
        &self,
        features: &FeatureMap,
        state: Option<&TrainableState>,
        projector: Option<&FeatureProjector>,
    ) -> Result<(Tensor, DecoderActivations)> {
        let default = TrainableState::default();
        let state = state.unwrap_or(&default);
        if state.touches_encoder() {
            return Err(Error::invalid("decode cannot apply encoder adapters to cached features"));
        }
        let mut tape = Tape::new();
        let f = tape.leaf(features.features.clone());
        let mut trace = ForwardTrace::default();
        let out_hw = self.output_hw(features.grid);
        let depth = self.decoder_on_tape(
            &mut tape,
            f,
            features.grid,
            out_hw,
            state,
            projector,
            &mut BoundParams::default(),
            &mut trace,
        )?;
        let value = tape.value(depth).clone();
        if !value.all_finite() {
            return Err(Error::NonFinite("decoder output"));
        }
        let acts = DecoderActivations {
            stage_pre: trace.stage_pre.iter().map(|&v| tape.value(v).clone()).collect(),
            stage_out: trace.stage_out.iter().map(|&v| tape.value(v).clone()).collect(),
            stage_grid: trace.stage_grid.clone(),
            head: tape.value(trace.head.expect("head recorded")).clone(),
            flops: tape.flops(),
        };
        Ok((value, acts))
    }
}

/// Concrete decoder activations from [`DepthModel::decode_traced`].
#[derive(Clone, Debug)]
pub struct DecoderActivations {
    pub stage_pre: Vec<Tensor>,
    pub stage_out: Vec<Tensor>,
    pub stage_grid: Vec<(usize, usize)>,
    /// Head output (log-depth before clamping), `[H·W, 1]`.
    pub head: Tensor,
    pub flops: FlopCount,
}

/// Fresh LoRA adapters for `layers`, drawn from `seed`.
pub fn fresh_adapters(
    model: &DepthModel,
    layers: &[LayerId],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<BTreeMap<LayerId, LoraAdapter>> {
    let mut rng = crate::world::rng_for(seed, 0x10ea);
    layers
        .iter()
        .map(|&id| {
            let l = model
                .layer(id)
                .ok_or_else(|| Error::invalid(format!("no layer {id}")))?;
            Ok((id, LoraAdapter::new(l.c_in(), l.c_out(), rank, alpha, &mut rng)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, SceneKind};

    fn small_model() -> DepthModel {
        DepthModel::init(ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn feature_shape_arithmetic() {
        let m = small_model();
        let s = generate_scene(SceneKind::Mixed, 32, 32, 0).unwrap();
        let f = m.encode(&s.image).unwrap();
        assert_eq!(f.shape(), (8, 8, 32));
        let d = m.decode(&f, None, None).unwrap();
        assert_eq!(d.shape(), &[32, 32]);
        assert!(d.data().iter().all(|&v| (OUTPUT_MIN..=OUTPUT_MAX).contains(&v)));
    }

    #[test]
    fn encode_counts_calls_and_is_deterministic() {
        let m = small_model();
        let s = generate_scene(SceneKind::Steps, 32, 32, 0).unwrap();
        let a = m.encode(&s.image).unwrap();
        let b = m.encode(&s.image).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.encode_calls(), 2);
    }

    #[test]
    fn uniform_image_gives_constant_map() {
        let m = small_model();
        let f = m.encode(&Tensor::zeros(&[16, 16, 3])).unwrap();
        let first = f.features.row(0).to_vec();
        // border renormalization of the smoothing leaves only rounding noise
        for p in 0..f.features.rows() {
            for (a, b) in f.features.row(p).iter().zip(&first) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let m = small_model();
        assert!(m.encode(&Tensor::zeros(&[30, 32, 3])).is_err());
        assert!(m.encode(&Tensor::zeros(&[32, 32, 1])).is_err());
    }

    #[test]
    fn fresh_adapters_leave_decode_bitwise_unchanged() {
        let m = small_model();
        let s = generate_scene(SceneKind::Spheres, 32, 32, 5).unwrap();
        let f = m.encode(&s.image).unwrap();
        let frozen = m.decode(&f, None, None).unwrap();
        let state = TrainableState {
            adapters: fresh_adapters(&m, &m.decoder_layer_ids(), 8, 8.0, 1).unwrap(),
            ..Default::default()
        };
        let adapted = m.decode(&f, Some(&state), None).unwrap();
        assert_eq!(frozen, adapted);
    }

    #[test]
    fn identity_projection_is_a_no_op() {
        let m = small_model();
        let s = generate_scene(SceneKind::Spheres, 32, 32, 6).unwrap();
        let f = m.encode(&s.image).unwrap();
        let plain = m.decode(&f, None, None).unwrap();
        let c = m.stages[1].c_out();
        let proj = FeatureProjector {
            stage: 1,
            matrix: Tensor::identity(c),
            offset: Tensor::zeros(&[c]),
        };
        assert_eq!(m.decode(&f, None, Some(&proj)).unwrap(), plain);
    }

    #[test]
    fn adapter_shape_mismatch_is_an_error() {
        let m = small_model();
        let f = m.encode(&Tensor::zeros(&[32, 32, 3])).unwrap();
        let mut rng = crate::world::rng_for(0, 0);
        let mut state = TrainableState::default();
        state
            .adapters
            .insert(LayerId::Decoder(0), LoraAdapter::new(5, 7, 2, 2.0, &mut rng).unwrap());
        assert!(m.decode(&f, Some(&state), None).is_err());
    }

    #[test]
    fn full_rank_adapter_can_cancel_a_stage() {
        // One-stage toy: solve (alpha/r)·B·A = −W with A = I, B = −W.
        let m = small_model();
        let w = m.stages[0].weight.clone();
        let (c_out, c_in) = (w.rows(), w.cols());
        let r = c_in;
        let ad = LoraAdapter::from_factors(Tensor::identity(r), w.scaled(-1.0), r as f64).unwrap();
        assert_eq!(ad.effective_delta().add(&w).unwrap().max_abs(), 0.0);
        let mut state = TrainableState::default();
        state.adapters.insert(LayerId::Decoder(0), ad);
        let f = m.encode(&Tensor::full(&[32, 32, 3], 0.3)).unwrap();
        let (_, acts) = m.decode_traced(&f, Some(&state), None).unwrap();
        let bias = m.stages[0].bias.data();
        for p in 0..acts.stage_pre[0].rows() {
            for c in 0..c_out {
                assert!((acts.stage_pre[0].at(p, c) - bias[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_ids_round_trip_through_strings() {
        for id in [LayerId::Encoder(2), LayerId::Decoder(4)] {
            assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
        }
        assert!("head".parse::<LayerId>().is_err());
    }

    #[test]
    fn feature_cache_hits_skip_the_encoder() {
        let m = small_model();
        let s = generate_scene(SceneKind::Planes, 32, 32, 1).unwrap();
        let mut cache = FeatureCache::new();
        let a = cache.get_or_encode(&m, &s.image).unwrap().clone();
        let b = cache.get_or_encode(&m, &s.image).unwrap().clone();
        assert_eq!(a, b);
        assert_eq!(m.encode_calls(), 1);
        assert_eq!(cache.source_hash(), Some(image_digest(&s.image)));
    }
}

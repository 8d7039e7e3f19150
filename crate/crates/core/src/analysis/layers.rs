//! Layer-wise correlation with the output, alignment of feature covariance
//! with update spectra, and single-layer fine-tuning of the decoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::pca::{feature_pca, pca_pc1_map, projector_matrix};
use super::spectral::{energy_fraction, svd};
use crate::alignment::align_on_tape;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{
    BoundParams, DepthModel, FeatureMap, FeatureProjector, ForwardTrace, LayerId, TrainableState,
};
use crate::spatial::SpatialOp;
use crate::tensor::Tensor;
use crate::world::SparseObservation;

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `|corr|` of a spatial map against the output after bilinear resizing to
/// the output grid. A constant map gives 0 and the flag `true`.
pub fn map_correlation(map: &Tensor, output: &Tensor) -> Result<(f64, bool)> {
    if map.rank() != 2 || output.rank() != 2 {
        return Err(Error::invalid("correlation maps must be 2-D"));
    }
    let in_hw = (map.shape()[0], map.shape()[1]);
    let out_hw = (output.shape()[0], output.shape()[1]);
    let resized = if in_hw == out_hw {
        map.data().to_vec()
    } else {
        SpatialOp::bilinear(in_hw, out_hw).apply(map.data(), 1)
    };
    Ok(match pearson(&resized, output.data()) {
        Some(r) => (r.abs(), false),
        None => (0.0, true),
    })
}

/// PC1 correlation of a `[positions, C]` feature map with the output.
/// Single-channel maps are used directly; dead (zero-variance) layers are
/// reported as constant.
pub fn feature_correlation(features: &Tensor, grid: (usize, usize), output: &Tensor) -> Result<(f64, bool)> {
    if features.cols() == 1 {
        let map = Tensor::new(vec![grid.0, grid.1], features.data().to_vec())?;
        return map_correlation(&map, output);
    }
    match pca_pc1_map(features, grid, 1) {
        Ok(pc1) => map_correlation(&pc1.map, output),
        Err(Error::InvalidArgument(msg)) if msg.contains("zero-variance") => Ok((0.0, true)),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub correlation: f64,
    /// The PC1 map was constant, so the correlation is defined as 0.
    pub constant: bool,
}

/// Correlation of every encoder layer, decoder stage and the head with the
/// frozen model's final depth on `image`.
pub fn layer_correlation(model: &DepthModel, image: &Tensor) -> Result<Vec<LayerCorrelation>> {
    let (f, enc_layers) = model.encode_traced(image)?;
    let (depth, acts) = model.decode_traced(&f, None, None)?;
    let mut out = Vec::new();
    let mut push = |layer: String, t: &Tensor, grid: (usize, usize)| -> Result<()> {
        let (correlation, constant) = feature_correlation(t, grid, &depth)?;
        out.push(LayerCorrelation {
            layer,
            grid_h: grid.0,
            grid_w: grid.1,
            channels: t.cols(),
            correlation,
            constant,
        });
        Ok(())
    };
    for (i, t) in enc_layers.iter().enumerate() {
        push(LayerId::Encoder(i).to_string(), t, f.grid)?;
    }
    for (i, t) in acts.stage_out.iter().enumerate() {
        push(LayerId::Decoder(i).to_string(), t, acts.stage_grid[i])?;
    }
    let hw = (depth.shape()[0], depth.shape()[1]);
    push(LayerId::Decoder(acts.stage_out.len()).to_string(), &acts.head, hw)?;
    Ok(out)
}

/// Frozen input features of every decoder layer (stages and head), each on
/// its own grid before any resize.
pub fn decoder_layer_inputs(model: &DepthModel, features: &FeatureMap) -> Result<BTreeMap<LayerId, Tensor>> {
    let (_, acts) = model.decode_traced(features, None, None)?;
    let mut out = BTreeMap::new();
    out.insert(LayerId::Decoder(0), features.features.clone());
    for (i, t) in acts.stage_out.iter().enumerate() {
        out.insert(LayerId::Decoder(i + 1), t.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceUpdateAlignment {
    /// Top-`k` share of the feature covariance spectrum.
    pub feature_energy: f64,
    /// Top-`k` share of the squared singular values of ΔW.
    pub update_energy: f64,
    /// `‖P_featᵀ V_upd‖_F² / k'` with `k' = min(k, available directions)`.
    pub affinity: f64,
}

/// Compares the top-`k` covariance subspace of a layer's input features with
/// the top-`k` right-singular subspace of its weight update.
pub fn covariance_update_alignment(features: &Tensor, delta: &Tensor, k: usize) -> Result<CovarianceUpdateAlignment> {
    if delta.rank() != 2 || features.rank() != 2 || delta.cols() != features.cols() {
        return Err(Error::Shape {
            op: "covariance_update_alignment",
            lhs: features.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    if k == 0 || k > features.cols() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", features.cols())));
    }
    let pca = feature_pca(&[features])?;
    let p = pca.top_k(k);
    let dec = svd(delta)?;
    let kv = k.min(dec.values.len());
    let mut mass = 0.0;
    for j in 0..kv {
        let v = dec.right.column(j);
        for a in 0..k {
            let dot: f64 = (0..v.len()).map(|i| p.at(i, a) * v[i]).sum();
            mass += dot * dot;
        }
    }
    Ok(CovarianceUpdateAlignment {
        feature_energy: pca.top_k_energy(k),
        update_energy: energy_fraction(delta, k)?,
        affinity: (mass / kv as f64).clamp(0.0, 1.0),
    })
}

/// Confines a feature map linearly to `span(basis)`: `F·P·Pᵀ`, no re-centering.
pub fn confine_to_span(features: &Tensor, basis: &Tensor) -> Result<Tensor> {
    features.matmul(&projector_matrix(basis))
}

/// A zero-offset projector onto `span(basis)` after decoder stage `stage`.
pub fn span_projector(stage: usize, basis: &Tensor) -> FeatureProjector {
    FeatureProjector {
        stage,
        matrix: projector_matrix(basis),
        offset: Tensor::zeros(&[basis.rows()]),
    }
}

#[derive(Clone, Debug)]
pub struct LayerFineTune {
    pub layer: LayerId,
    /// `W_T − W_0`.
    pub delta: Tensor,
    pub losses: Vec<f64>,
}

/// Plain gradient descent on one decoder layer's weight and bias against the
/// aligned sparse loss, all other layers frozen.
pub fn fine_tune_layer(
    model: &DepthModel,
    features: &FeatureMap,
    obs: &SparseObservation,
    layer: LayerId,
    projector: Option<&FeatureProjector>,
    iterations: usize,
    learning_rate: f64,
) -> Result<LayerFineTune> {
    if !matches!(layer, LayerId::Decoder(_)) {
        return Err(Error::invalid("single-layer fine-tuning applies to decoder layers"));
    }
    let base = model
        .layer(layer)
        .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?
        .clone();
    let out_hw = model.output_hw(features.grid);
    obs.validate(out_hw.0, out_hw.1)?;
    let omega = Arc::new(obs.flat_indices(out_hw.1));
    let mut state = TrainableState::default();
    state.overrides.insert(layer, base.clone());
    let mut losses = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let fv = tape.leaf(features.features.clone());
        let depth = model.decoder_on_tape(
            &mut tape,
            fv,
            features.grid,
            out_hw,
            &state,
            projector,
            &mut bound,
            &mut ForwardTrace::default(),
        )?;
        let flat = tape.reshape(depth, &[out_hw.0 * out_hw.1])?;
        let at = tape.gather(flat, omega.clone())?;
        let al = align_on_tape(&mut tape, at, &obs.values, false)?;
        let target = tape.leaf(Tensor::vector(obs.values.clone()));
        let r = tape.sub(al.aligned, target)?;
        let sq = tape.square(r);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let (w, b) = bound.full[&layer];
        let l = state.overrides.get_mut(&layer).expect("inserted above");
        l.weight = l.weight.sub(&grads.get(w).expect("param").scaled(learning_rate))?;
        l.bias = l.bias.sub(&grads.get(b).expect("param").scaled(learning_rate))?;
    }
    let delta = state.overrides[&layer].weight.sub(&base.weight)?;
    Ok(LayerFineTune { layer, delta, losses })
}

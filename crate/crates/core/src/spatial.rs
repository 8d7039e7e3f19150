//! Fixed sparse linear operators over spatial positions.
//!
//! Feature maps are stored as `[positions, channels]` matrices with positions
//! in row-major pixel order. A [`SpatialOp`] maps one grid onto another by a
//! fixed weighted sum over input positions, applied identically per channel.

/// A fixed, non-trainable linear map between two spatial grids.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialOp {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<Vec<(usize, f64)>>,
}

impl SpatialOp {
    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let (ih, iw) = in_hw;
        let (oh, ow) = out_hw;
        let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        };
        let mut rows = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, ih, oh);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, iw, ow);
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |idx: usize, w: f64| {
                    if w == 0.0 {
                        return;
                    }
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                };
                push(y0 * iw + x0, (1.0 - fy) * (1.0 - fx));
                push(y0 * iw + x1, (1.0 - fy) * fx);
                push(y1 * iw + x0, fy * (1.0 - fx));
                push(y1 * iw + x1, fy * fx);
                rows.push(taps);
            }
        }
        SpatialOp { in_hw, out_hw, rows }
    }

    /// 3×3 binomial smoothing (`[1, 2, 1]` per axis), renormalized at the borders.
    pub fn smooth3(hw: (usize, usize)) -> Self {
        let (h, w) = hw;
        let mut rows = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut taps = Vec::with_capacity(9);
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let wy = if yy == y { 2.0 } else { 1.0 };
                        let wx = if xx == x { 2.0 } else { 1.0 };
                        taps.push((yy * w + xx, wy * wx));
                    }
                }
                let norm: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= norm);
                rows.push(taps);
            }
        }
        SpatialOp {
            in_hw: hw,
            out_hw: hw,
            rows,
        }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn in_positions(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }

    pub fn out_positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `out[p, c] = Σ w · input[q, c]` over `channels` channels.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_positions() * channels];
        for (p, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[p * channels..(p + 1) * channels];
            for &(q, w) in taps {
                let src = &input[q * channels..(q + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint application: scatters `grad` on the output grid back to the input grid.
    pub fn apply_transpose(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.in_positions() * channels];
        for (p, taps) in self.rows.iter().enumerate() {
            let src = &grad[p * channels..(p + 1) * channels];
            for &(q, w) in taps {
                let dst = &mut out[q * channels..(q + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

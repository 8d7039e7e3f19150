//! Closed-form scale–shift alignment of predicted depth to sparse measurements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::SparseObservation;

/// Minimum variance of the prediction over the observed pixels.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Affine map `a·D + b` from prediction to measurement units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift {
    pub a: f64,
    pub b: f64,
}

impl ScaleShift {
    pub const IDENTITY: ScaleShift = ScaleShift { a: 1.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("scale-shift"));
        }
        Ok(ScaleShift { a, b })
    }

    /// Elementwise `a·pred + b`.
    pub fn apply(&self, pred: &Tensor) -> Tensor {
        pred.map(|d| self.a * d + self.b)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Least-squares `(a, b)` minimizing `Σ (a·p + b − s)²` over paired samples.
pub fn fit_pairs(pred: &[f64], target: &[f64]) -> Result<ScaleShift> {
    if pred.len() != target.len() {
        return Err(Error::invalid("prediction/target length mismatch"));
    }
    if pred.len() < 2 {
        return Err(Error::InsufficientObservations {
            need: 2,
            got: pred.len(),
        });
    }
    let (mp, ms) = (mean(pred), mean(target));
    let n = pred.len() as f64;
    let var = pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / n;
    if var <= VARIANCE_EPS {
        return Err(Error::DegeneratePrediction { variance: var });
    }
    let cov = pred
        .iter()
        .zip(target)
        .map(|(p, s)| (p - mp) * (s - ms))
        .sum::<f64>()
        / n;
    let a = cov / var;
    ScaleShift::new(a, ms - a * mp)
}

/// Prediction values at the observed pixels of a `[H, W]` depth map.
pub fn values_at(pred: &Tensor, obs: &SparseObservation) -> Result<Vec<f64>> {
    let (h, w) = match pred.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "values_at",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    obs.validate(h, w)?;
    Ok(obs.flat_indices(w).iter().map(|&p| pred.data()[p]).collect())
}

/// Fits the scale–shift aligning `pred` (an `[H, W]` map) to `obs`.
pub fn fit_scale_shift(pred: &Tensor, obs: &SparseObservation) -> Result<ScaleShift> {
    fit_pairs(&values_at(pred, obs)?, &obs.values)
}

/// Like [`fit_scale_shift`] but falls back to `a = 1, b = mean(S) − mean(pred)`
/// when the prediction is degenerate at Ω. The flag reports the fallback.
pub fn fit_or_fallback(pred_at: &[f64], target: &[f64]) -> Result<(ScaleShift, bool)> {
    match fit_pairs(pred_at, target) {
        Ok(ss) => Ok((ss, false)),
        Err(Error::DegeneratePrediction { .. }) => {
            let b = mean(target) - mean(pred_at);
            Ok((ScaleShift::new(1.0, b)?, true))
        }
        Err(e) => Err(e),
    }
}

/// Output of the on-tape alignment step.
#[derive(Clone, Copy, Debug)]
pub struct TapeAlignment {
    /// Aligned prediction at Ω, shape `[n]`.
    pub aligned: Var,
    pub scale: Var,
    pub shift: Var,
    pub fallback: bool,
}

/// Aligns `pred_at` (prediction gathered at Ω, shape `[n]`) to `target` on the
/// tape. With `detach` the fitted `(a, b)` enter as constants; otherwise the
/// gradient flows through the least-squares solution.
pub fn align_on_tape(
    tape: &mut Tape,
    pred_at: Var,
    target: &[f64],
    detach: bool,
) -> Result<TapeAlignment> {
    let values = tape.value(pred_at).data().to_vec();
    let (fitted, fallback) = fit_or_fallback(&values, target)?;
    if detach {
        let scale = tape.leaf(Tensor::scalar(fitted.a));
        let shift = tape.leaf(Tensor::scalar(fitted.b));
        let scaled = tape.mul(pred_at, scale)?;
        let aligned = tape.add(scaled, shift)?;
        return Ok(TapeAlignment {
            aligned,
            scale,
            shift,
            fallback,
        });
    }

    let s = tape.leaf(Tensor::vector(target.to_vec()));
    let s_mean = tape.leaf(Tensor::scalar(mean(target)));
    let p_mean = tape.mean(pred_at);
    let scale = if fallback {
        tape.leaf(Tensor::scalar(1.0))
    } else {
        let p_c = tape.sub(pred_at, p_mean)?;
        let s_c = tape.sub(s, s_mean)?;
        let cross = tape.mul(p_c, s_c)?;
        let cov = tape.mean(cross);
        let sq = tape.square(p_c);
        let var = tape.mean(sq);
        tape.div(cov, var)?
    };
    let scaled_mean = tape.mul(p_mean, scale)?;
    let shift = tape.sub(s_mean, scaled_mean)?;
    let scaled = tape.mul(pred_at, scale)?;
    let aligned = tape.add(scaled, shift)?;
    Ok(TapeAlignment {
        aligned,
        scale,
        shift,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_grad;
    use proptest::prelude::*;
    use rand::Rng;

    fn obs_from(values: Vec<f64>, omega: Vec<(usize, usize)>) -> SparseObservation {
        SparseObservation {
            omega,
            values,
            sensor_scale: 1.0,
            sensor_shift: 0.0,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn identity_and_exact_linear_relation() {
        let p = [1.0, 2.5, 3.0, 7.0, 4.2];
        let ss = fit_pairs(&p, &p).unwrap();
        assert!((ss.a - 1.0).abs() < 1e-12 && ss.b.abs() < 1e-12);
        let s: Vec<f64> = p.iter().map(|x| 2.0 * x + 1.0).collect();
        let ss = fit_pairs(&p, &s).unwrap();
        assert!((ss.a - 2.0).abs() < 1e-10 && (ss.b - 1.0).abs() < 1e-10);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            fit_pairs(&[1.0], &[2.0]),
            Err(Error::InsufficientObservations { .. })
        ));
        assert!(matches!(
            fit_pairs(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegeneratePrediction { .. })
        ));
        let (ss, fb) = fit_or_fallback(&[3.0, 3.0], &[1.0, 2.0]).unwrap();
        assert!(fb);
        assert_eq!(ss, ScaleShift { a: 1.0, b: -1.5 });
    }

    #[test]
    fn apply_examples() {
        let p = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(ScaleShift::IDENTITY.apply(&p), p);
        let c = ScaleShift { a: 0.0, b: 2.5 }.apply(&p);
        assert!(c.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn refit_after_apply_is_identity() {
        let mut rng = crate::world::rng_for(5, 0);
        let pred = Tensor::matrix(4, 4, (0..16).map(|_| rng.gen_range(1.0..5.0)).collect()).unwrap();
        let omega: Vec<_> = (0..16).step_by(2).map(|p| (p / 4, p % 4)).collect();
        let values = omega.iter().map(|_| rng.gen_range(0.0..8.0)).collect();
        let obs = obs_from(values, omega);
        let ss = fit_scale_shift(&pred, &obs).unwrap();
        let again = fit_scale_shift(&ss.apply(&pred), &obs).unwrap();
        assert!((again.a - 1.0).abs() < 1e-10 && again.b.abs() < 1e-10);
    }

    #[test]
    fn tape_alignment_matches_closed_form_and_finite_differences() {
        let mut rng = crate::world::rng_for(17, 0);
        let p0: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..4.0)).collect();
        let s: Vec<f64> = p0.iter().map(|p| 1.3 * p * p + 0.2 + rng.gen_range(-0.1..0.1)).collect();

        let loss_of = |p: &[f64]| {
            let ss = fit_pairs(p, &s).unwrap();
            p.iter()
                .zip(&s)
                .map(|(p, s)| (ss.a * p + ss.b - s).powi(2))
                .sum::<f64>()
                / p.len() as f64
        };

        let mut tape = Tape::new();
        let pv = tape.param(Tensor::vector(p0.clone()));
        let al = align_on_tape(&mut tape, pv, &s, false).unwrap();
        let closed = fit_pairs(&p0, &s).unwrap();
        assert!((tape.value(al.scale).item() - closed.a).abs() < 1e-12);
        assert!((tape.value(al.shift).item() - closed.b).abs() < 1e-12);

        let target = tape.leaf(Tensor::vector(s.clone()));
        let r = tape.sub(al.aligned, target).unwrap();
        let sq = tape.square(r);
        let loss = tape.mean(sq);
        assert!((tape.value(loss).item() - loss_of(&p0)).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let fd = finite_difference_grad(loss_of, &p0, 1e-6);
        for (a, b) in g.get(pv).unwrap().data().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn residual_is_orthogonal_to_regressors(
            pairs in prop::collection::vec((0.5f64..10.0, -5.0f64..15.0), 3..60)
        ) {
            let (p, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(fit_pairs(&p, &s).is_ok());
            let ss = fit_pairs(&p, &s).unwrap();
            let r: Vec<f64> = p.iter().zip(&s).map(|(p, s)| ss.a * p + ss.b - s).collect();
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot_p: f64 = r.iter().zip(&p).map(|(r, p)| r * p).sum();
            let dot_1: f64 = r.iter().sum();
            let scale = (rn * pn).max(1e-300);
            prop_assert!(dot_p.abs() / scale < 1e-8 || dot_p.abs() < 1e-9);
            prop_assert!(dot_1.abs() / (rn * (p.len() as f64).sqrt()).max(1e-300) < 1e-8 || dot_1.abs() < 1e-9);
        }

        #[test]
        fn affine_equivariance(
            pairs in prop::collection::vec((0.5f64..10.0, -5.0f64..15.0), 3..40),
            c in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.5]),
            d in -4.0f64..4.0,
        ) {
            let (p, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(fit_pairs(&p, &s).is_ok());
            let base = fit_pairs(&p, &s).unwrap();
            let moved: Vec<f64> = p.iter().map(|x| c * x + d).collect();
            let ss = fit_pairs(&moved, &s).unwrap();
            prop_assert!((ss.a - base.a / c).abs() < 1e-10 * (1.0 + base.a.abs()));
            prop_assert!((ss.b - (base.b - base.a * d / c)).abs() < 1e-10 * (1.0 + base.b.abs() + base.a.abs()));
        }
    }
}

//! Numerical checks of the subspace rank bounds for gradients of a linear
//! layer, and of local affinity of the ReLU decoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::pca::projector_matrix;
use crate::analysis::spectral::{orthonormality_error, random_orthonormal, svd};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{DepthModel, FeatureMap, OUTPUT_MAX, OUTPUT_MIN};
use crate::tensor::Tensor;
use crate::world::rng_for;

/// Tolerance of the rank and containment assertions.
pub const RANK_TOL: f64 = 1e-10;
/// Relative tolerance of the outer-product norm identity.
pub const IDENTITY_TOL: f64 = 1e-12;

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let d = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, d).expect("sized")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn outer(g: &[f64], x: &[f64]) -> Tensor {
    let d = g.iter().flat_map(|a| x.iter().map(move |b| a * b)).collect();
    Tensor::matrix(g.len(), x.len(), d).expect("sized")
}

/// A linear layer `y = W x` fed with inputs `x = P z + ε`.
#[derive(Clone, Debug)]
pub struct SubspaceScenario {
    /// `d × r`, orthonormal columns.
    pub basis: Tensor,
    /// `[n, r]` subspace coordinates.
    pub z: Tensor,
    /// `[n, d]` residuals, all zero in the exact setting.
    pub eps: Tensor,
    /// `[n, m]` output-side error signals.
    pub g: Tensor,
    /// `m × d`.
    pub weight: Tensor,
}

impl SubspaceScenario {
    /// Random scenario with `n` samples; residuals are Gaussian scaled by
    /// `eps_scale` (0 for the exact setting).
    pub fn random(d: usize, r: usize, m: usize, n: usize, eps_scale: f64, seed: u64) -> Result<Self> {
        if r == 0 || r > d || m == 0 || n == 0 {
            return Err(Error::invalid(format!("need 1 ≤ r ≤ d, m ≥ 1, n ≥ 1; got d={d} r={r} m={m} n={n}")));
        }
        let mut rng = rng_for(seed, 0x7e0);
        let basis = random_orthonormal(d, r, &mut rng)?;
        let z = gaussian(n, r, &mut rng);
        let eps = gaussian(n, d, &mut rng).scaled(eps_scale);
        let g = gaussian(n, m, &mut rng);
        let weight = gaussian(m, d, &mut rng).scaled(1.0 / (d as f64).sqrt());
        let s = SubspaceScenario { basis, z, eps, g, weight };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let err = orthonormality_error(&self.basis);
        if err >= IDENTITY_TOL {
            return Err(Error::invalid(format!("basis is not orthonormal ({err:e})")));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.basis.rows(), self.basis.cols(), self.weight.rows())
    }

    /// `[n, d]` inputs `x_i = P z_i + ε_i`.
    pub fn inputs(&self) -> Tensor {
        self.z
            .matmul(&self.basis.transpose())
            .and_then(|x| x.add(&self.eps))
            .expect("conformable")
    }

    /// In-subspace part `P z_i` only.
    pub fn subspace_inputs(&self) -> Tensor {
        self.z.matmul(&self.basis.transpose()).expect("conformable")
    }
}

/// Scalar losses of `Y = X Wᵀ` used to drive the checks.
#[derive(Clone, Debug)]
pub enum LossKind {
    /// `Σ_i g_iᵀ y_i`, so `∂L/∂y_i = g_i` exactly.
    Linear,
    /// `Σ c ⊙ (Y − T)²` with random positive weights and targets.
    Quadratic { seed: u64 },
}

/// Gradient `∂L/∂W` by reverse-mode autodiff.
pub fn weight_gradient(scenario: &SubspaceScenario, inputs: &Tensor, weight: &Tensor, loss: &LossKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = tape.param(weight.clone());
    let x = tape.leaf(inputs.clone());
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    let l = match loss {
        LossKind::Linear => {
            let g = tape.leaf(scenario.g.clone());
            let p = tape.mul(y, g)?;
            tape.sum(p)
        }
        LossKind::Quadratic { seed } => {
            let shape = tape.value(y).shape().to_vec();
            let mut rng = rng_for(*seed, 0x10c);
            let c: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(0.5..2.0)).collect();
            let t = gaussian(shape[0], shape[1], &mut rng);
            let c = tape.leaf(Tensor::new(shape, c)?);
            let t = tape.leaf(t);
            let r = tape.sub(y, t)?;
            let sq = tape.square(r);
            let p = tape.mul(sq, c)?;
            tape.sum(p)
        }
    };
    let grads = tape.backward(l)?;
    Ok(grads.get(w).expect("param gradient").clone())
}

/// `σ_{r+1}/σ₁`, 0 when there is no `(r+1)`-th value or the matrix is zero.
fn tail_ratio(values: &[f64], r: usize) -> f64 {
    match (values.first(), values.get(r)) {
        (Some(&s1), Some(&sr)) if s1 > 0.0 => sr / s1,
        _ => 0.0,
    }
}

/// Largest relative row leak `‖(I − PPᵀ) rowᵀ‖ / ‖row‖` over nonzero rows.
pub fn row_space_leak(m: &Tensor, basis: &Tensor) -> f64 {
    let off = m
        .matmul(&projector_matrix(basis))
        .and_then(|p| m.sub(&p))
        .expect("conformable");
    (0..m.rows())
        .filter_map(|i| {
            let n = norm(m.row(i));
            (n > 0.0).then(|| norm(off.row(i)) / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankVerdict {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    /// Gradient steps; 1 for a single-gradient check.
    pub steps: usize,
    pub sigma_ratio: f64,
    pub row_leak: f64,
    /// Leading singular values, kept for diagnosing failures.
    pub singular_values: Vec<f64>,
    pub pass: bool,
}

fn rank_verdict(m: &Tensor, basis: &Tensor, steps: usize) -> Result<RankVerdict> {
    let dec = svd(m)?;
    let r = basis.cols();
    let sigma_ratio = tail_ratio(&dec.values, r);
    let row_leak = row_space_leak(m, basis);
    Ok(RankVerdict {
        d: basis.rows(),
        r,
        m: m.rows(),
        steps,
        sigma_ratio,
        row_leak,
        singular_values: dec.values.iter().take(r + 2).copied().collect(),
        pass: sigma_ratio < RANK_TOL && row_leak < RANK_TOL,
    })
}

/// Gradient rank and row space for subspace-confined inputs. Residuals in the
/// scenario are used as given, so a scenario with `ε ≠ 0` is expected to fail.
pub fn check_gradient_rank(scenario: &SubspaceScenario, loss: &LossKind) -> Result<RankVerdict> {
    let grad = weight_gradient(scenario, &scenario.inputs(), &scenario.weight, loss)?;
    rank_verdict(&grad, &scenario.basis, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionVerdict {
    pub samples: usize,
    /// Largest `|‖gεᵀ‖_F − ‖g‖‖ε‖| / (‖g‖‖ε‖)` over samples.
    pub identity_violation: f64,
    /// `‖∂L/∂W − Σ (g zᵀPᵀ + g εᵀ)‖_F`.
    pub decomposition_error: f64,
    /// Rank-`r` truncation error of the gradient.
    pub tail_norm: f64,
    /// `‖Σ g εᵀ‖_F`.
    pub residual_norm: f64,
    pub pass: bool,
}

/// Outer-product norm identity, gradient decomposition into a rank-`r` part
/// plus a residual term, and the resulting truncation bound.
pub fn check_decomposition(scenario: &SubspaceScenario) -> Result<DecompositionVerdict> {
    let (d, r, m) = scenario.dims();
    let n = scenario.z.rows();
    let mut identity_violation: f64 = 0.0;
    let mut explicit = Tensor::zeros(&[m, d]);
    let mut residual = Tensor::zeros(&[m, d]);
    let px = scenario.subspace_inputs();
    for i in 0..n {
        let g = scenario.g.row(i);
        let e = scenario.eps.row(i);
        let ge = outer(g, e);
        let expect = norm(g) * norm(e);
        if expect > 0.0 {
            identity_violation = identity_violation.max((ge.frobenius_norm() - expect).abs() / expect);
        } else if ge.frobenius_norm() != 0.0 {
            identity_violation = f64::INFINITY;
        }
        explicit = explicit.add(&outer(g, px.row(i)))?.add(&ge)?;
        residual = residual.add(&ge)?;
    }
    let grad = weight_gradient(scenario, &scenario.inputs(), &scenario.weight, &LossKind::Linear)?;
    let decomposition_error = grad.sub(&explicit)?.frobenius_norm();
    let dec = svd(&grad)?;
    let tail_norm = dec.values.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt();
    let residual_norm = residual.frobenius_norm();
    Ok(DecompositionVerdict {
        samples: n,
        identity_violation,
        decomposition_error,
        tail_norm,
        residual_norm,
        pass: identity_violation < IDENTITY_TOL
            && decomposition_error < RANK_TOL
            && tail_norm <= residual_norm + RANK_TOL,
    })
}

/// Largest relative violation of `‖gεᵀ‖_F = ‖g‖‖ε‖` over `trials` random
/// pairs of varied dimension and scale.
pub fn outer_norm_identity_trials(trials: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, 0x1de);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let m = rng.gen_range(1..=48);
        let d = rng.gen_range(1..=96);
        let sg = 10f64.powf(rng.gen_range(-3.0..3.0));
        let se = 10f64.powf(rng.gen_range(-3.0..3.0));
        let g: Vec<f64> = (0..m).map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                sg * x
            }).collect();
        let e: Vec<f64> = (0..d).map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                se * x
            }).collect();
        let expect = norm(&g) * norm(&e);
        worst = worst.max((outer(&g, &e).frobenius_norm() - expect).abs() / expect);
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub rank: RankVerdict,
    /// `A_T = ΔW_T · P`, `m × r`, row-major.
    pub a_t: Vec<f64>,
    /// `‖ΔW_T − A_T Pᵀ‖_F`.
    pub off_subspace: f64,
    /// `Σ_t η_t ‖g_t‖ ‖ε_t‖`.
    pub off_bound: f64,
    pub losses: Vec<f64>,
    /// Exact rank assertion enforced (always for `ε = 0`, or in strict mode).
    pub strict: bool,
    pub pass: bool,
}

/// Runs `etas.len()` gradient steps on `½‖W x_t − y*_t‖²`, cycling through
/// the scenario's samples, then checks the accumulated update.
pub fn check_trajectory(scenario: &SubspaceScenario, etas: &[f64], strict: bool) -> Result<TrajectoryVerdict> {
    let (_, _, m) = scenario.dims();
    let n = scenario.z.rows();
    let inputs = scenario.inputs();
    let mut rng = rng_for(m as u64 * 1_000 + n as u64, 0xc0f);
    let targets = gaussian(n, m, &mut rng);
    let mut w = scenario.weight.clone();
    let mut off_bound = 0.0;
    let mut losses = Vec::with_capacity(etas.len());
    for (t, &eta) in etas.iter().enumerate() {
        let i = t % n;
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let x = tape.leaf(Tensor::matrix(1, inputs.cols(), inputs.row(i).to_vec())?);
        let wt = tape.transpose(wv)?;
        let y = tape.matmul(x, wt)?;
        let target = tape.leaf(Tensor::matrix(1, m, targets.row(i).to_vec())?);
        let res = tape.sub(y, target)?;
        let sq = tape.square(res);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        losses.push(tape.value(loss).item());
        let g_t = norm(tape.value(res).data());
        off_bound += eta * g_t * norm(scenario.eps.row(i));
        let grads = tape.backward(loss)?;
        w = w.sub(&grads.get(wv).expect("param").scaled(eta))?;
    }
    let delta = w.sub(&scenario.weight)?;
    let a_t = delta.matmul(&scenario.basis)?;
    let off_subspace = delta.sub(&a_t.matmul(&scenario.basis.transpose())?)?.frobenius_norm();
    let rank = rank_verdict(&delta, &scenario.basis, etas.len())?;
    let exact = strict || scenario.eps.max_abs() == 0.0;
    let within = off_subspace <= off_bound + RANK_TOL;
    Ok(TrajectoryVerdict {
        pass: within && (!exact || rank.pass),
        rank,
        a_t: a_t.into_data(),
        off_subspace,
        off_bound,
        losses,
        strict: exact,
    })
}

/// Random step sizes in `[0.5 η, 1.5 η]`.
pub fn random_schedule(steps: usize, eta: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 0x5c4);
    (0..steps).map(|_| eta * rng.gen_range(0.5..1.5)).collect()
}

/// One `(d, r, m, T)` cell of the verification grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub steps: usize,
}

pub fn default_grid() -> Vec<GridCell> {
    let mut out = Vec::new();
    for d in [16, 64] {
        for r in [1, 4, 8] {
            for m in [8, 32] {
                for steps in [1, 10, 40] {
                    out.push(GridCell { d, r, m, steps });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: GridCell,
    pub gradient_rank: RankVerdict,
    pub decomposition: DecompositionVerdict,
    pub trajectory: TrajectoryVerdict,
    /// Trajectory under a random step-size schedule.
    pub trajectory_schedule: TrajectoryVerdict,
    pub pass: bool,
}

/// Runs all checks for one cell. `eps_scale > 0` injects residuals; with
/// `strict` the exact rank bound is still asserted (a negative control).
pub fn run_cell(cell: GridCell, eps_scale: f64, strict: bool, seed: u64) -> Result<CellReport> {
    let cell_seed = seed ^ ((cell.d as u64) << 24 | (cell.r as u64) << 16 | (cell.m as u64) << 8 | cell.steps as u64);
    let s = SubspaceScenario::random(cell.d, cell.r, cell.m, 10, eps_scale, cell_seed)?;
    let gradient_rank = check_gradient_rank(&s, &LossKind::Quadratic { seed: cell_seed })?;
    let gradient_rank_pass = gradient_rank.pass || (eps_scale > 0.0 && !strict);
    let decomposition = check_decomposition(&s)?;
    let trajectory = check_trajectory(&s, &vec![0.01; cell.steps], strict)?;
    let trajectory_schedule = check_trajectory(&s, &random_schedule(cell.steps, 0.01, cell_seed), strict)?;
    let pass = gradient_rank_pass && decomposition.pass && trajectory.pass && trajectory_schedule.pass;
    Ok(CellReport {
        cell,
        gradient_rank,
        decomposition,
        trajectory,
        trajectory_schedule,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityVerdict {
    /// Largest tested radius with a fixed activation pattern and passing
    /// collinearity; `None` means no linear neighbourhood at tolerance.
    pub delta: Option<f64>,
    /// Second difference `max|h(δ) − 2h(δ/2) + h(0)|` at that radius.
    pub second_difference: f64,
    pub radii_tested: usize,
}

/// Activation pattern of the decoder: ReLU signs of every stage plus whether
/// each head output lies strictly inside the clamp range. Also returns the
/// head output (pre-clamp log-depth).
fn pattern(model: &DepthModel, features: &FeatureMap) -> Result<(Vec<bool>, Tensor)> {
    let (_, acts) = model.decode_traced(features, None, None)?;
    let (lo, hi) = (OUTPUT_MIN.ln(), OUTPUT_MAX.ln());
    let mut bits: Vec<bool> = acts.stage_pre.iter().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect();
    bits.extend(acts.head.data().iter().map(|&v| v > lo && v < hi));
    Ok((bits, acts.head))
}

fn shifted(features: &FeatureMap, direction: &Tensor, delta: f64) -> Result<FeatureMap> {
    Ok(FeatureMap {
        features: features.features.add(&direction.scaled(delta))?,
        grid: features.grid,
    })
}

fn second_difference(h0: &Tensor, h1: &Tensor, h2: &Tensor) -> f64 {
    h0.data()
        .iter()
        .zip(h1.data())
        .zip(h2.data())
        .map(|((a, b), c)| (c - 2.0 * b + a).abs())
        .fold(0.0, f64::max)
}

/// Evaluates the head at `f`, `f + (δ/2) u` and `f + δ u`; returns the
/// second difference and whether the activation pattern stayed fixed.
pub fn segment_test(model: &DepthModel, features: &FeatureMap, direction: &Tensor, delta: f64) -> Result<(f64, bool)> {
    let (p0, h0) = pattern(model, features)?;
    let (p1, h1) = pattern(model, &shifted(features, direction, 0.5 * delta)?)?;
    let (p2, h2) = pattern(model, &shifted(features, direction, delta)?)?;
    Ok((second_difference(&h0, &h1, &h2), p0 == p1 && p1 == p2))
}

/// Searches radii `δ_max · 2^-k` for the largest segment along a random unit
/// direction on which the activation pattern is fixed and the head output is
/// affine within [`RANK_TOL`].
pub fn linearity_probe(model: &DepthModel, features: &FeatureMap, delta_max: f64, seed: u64) -> Result<LinearityVerdict> {
    let mut rng = rng_for(seed, 0x11e);
    let f = &features.features;
    let u = gaussian(f.rows(), f.cols(), &mut rng);
    let u = u.scaled(1.0 / u.frobenius_norm());
    let radii = 48;
    for k in 0..radii {
        let delta = delta_max * 0.5f64.powi(k);
        let (sd, fixed) = segment_test(model, features, &u, delta)?;
        if fixed && sd < RANK_TOL {
            return Ok(LinearityVerdict {
                delta: Some(delta),
                second_difference: sd,
                radii_tested: k as usize + 1,
            });
        }
    }
    Ok(LinearityVerdict {
        delta: None,
        second_difference: f64::NAN,
        radii_tested: radii as usize,
    })
}

/// Negative control: steers one first-stage unit across its kink between
/// the midpoint and the endpoint of the segment, trying every channel at
/// the grid centre. Returns the largest second difference found.
pub fn kink_crossing_control(model: &DepthModel, features: &FeatureMap) -> Result<f64> {
    let (_, acts) = model.decode_traced(features, None, None)?;
    let pre = &acts.stage_pre[0];
    let w = &model.stages[0].weight;
    let (gh, gw) = features.grid;
    let pos = (gh / 2) * gw + gw / 2;
    let mut best: f64 = 0.0;
    for c in 0..w.rows() {
        let row = w.row(c);
        let wn = norm(row);
        let s0 = pre.at(pos, c);
        if wn == 0.0 || s0 == 0.0 {
            continue;
        }
        // Move against the sign so that s(δ) = s0 - sign(s0)·δ‖w‖ hits 0 at δ*.
        let mut u = Tensor::zeros(features.features.shape());
        for (j, &v) in row.iter().enumerate() {
            u.set(pos, j, -s0.signum() * v / wn);
        }
        let kink = s0.abs() / wn;
        let (sd, _) = segment_test(model, features, &u, 1.5 * kink)?;
        best = best.max(sd);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub cells: Vec<CellReport>,
    /// Largest relative violation over random outer-product pairs.
    pub identity_trials: usize,
    pub identity_violation: f64,
    pub eps_scale: f64,
    pub strict: bool,
    pub pass: bool,
}

/// Runs the verification grid plus the Monte-Carlo identity check.
pub fn run_grid(cells: &[GridCell], eps_scale: f64, strict: bool, seed: u64) -> Result<TheoryReport> {
    let reports = cells
        .iter()
        .map(|&c| run_cell(c, eps_scale, strict, seed))
        .collect::<Result<Vec<_>>>()?;
    let identity_trials = 1000;
    let identity_violation = outer_norm_identity_trials(identity_trials, seed);
    let pass = reports.iter().all(|c| c.pass) && identity_violation < IDENTITY_TOL;
    Ok(TheoryReport {
        cells: reports,
        identity_trials,
        identity_violation,
        eps_scale,
        strict,
        pass,
    })
}

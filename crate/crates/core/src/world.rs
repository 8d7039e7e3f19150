//! Synthetic scenes and sparse, sensor-corrupted depth observations.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEPTH_MIN: f64 = 0.5;
pub const DEPTH_MAX: f64 = 10.0;

/// Default sensor corruption: `S = 1.25 D + 0.4 + N(0, 0.01²)`.
pub const DEFAULT_SENSOR_SCALE: f64 = 1.25;
pub const DEFAULT_SENSOR_SHIFT: f64 = 0.4;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
/// Per-scene tone exponents are drawn log-uniformly from `[TONE_GAMMA_MIN, TONE_GAMMA_MAX]`.
pub const TONE_GAMMA_MIN: f64 = 1.0;
pub const TONE_GAMMA_MAX: f64 = 4.0;
/// Standard deviation of per-pixel texture noise in the image.
pub const TEXTURE_NOISE: f64 = 0.01;

/// Seeded generator used for every random draw in the crate.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Planes,
    Spheres,
    Steps,
    Mixed,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Planes,
        SceneKind::Spheres,
        SceneKind::Steps,
        SceneKind::Mixed,
    ];

    fn stream(self) -> u64 {
        match self {
            SceneKind::Planes => 1,
            SceneKind::Spheres => 2,
            SceneKind::Steps => 3,
            SceneKind::Mixed => 4,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SceneKind::Planes => "planes",
            SceneKind::Spheres => "spheres",
            SceneKind::Steps => "steps",
            SceneKind::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planes" => Ok(SceneKind::Planes),
            "spheres" => Ok(SceneKind::Spheres),
            "steps" => Ok(SceneKind::Steps),
            "mixed" => Ok(SceneKind::Mixed),
            other => Err(Error::invalid(format!("unknown scene kind `{other}`"))),
        }
    }
}

/// A synthetic RGB-like image with its dense metric depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub kind: SceneKind,
    pub seed: u64,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, meters, within `[DEPTH_MIN, DEPTH_MAX]`.
    pub depth: Tensor,
    /// Exponent of the per-scene tone curve (see [`tone_code`]); unknown to the model.
    pub tone_gamma: f64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

/// Sparse depth measurements at a set of pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseObservation {
    /// Unique `(row, col)` pixel coordinates.
    pub omega: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub sensor_scale: f64,
    pub sensor_shift: f64,
    pub noise_sigma: f64,
}

impl SparseObservation {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Row-major flat pixel indices of `omega` for a grid of width `width`.
    pub fn flat_indices(&self, width: usize) -> Vec<usize> {
        self.omega.iter().map(|&(i, j)| i * width + j).collect()
    }

    /// Checks bounds, uniqueness and non-emptiness against an `h × w` grid.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.omega.is_empty() {
            return Err(Error::InsufficientObservations { need: 1, got: 0 });
        }
        if self.omega.len() != self.values.len() {
            return Err(Error::invalid("observation coordinate/value count mismatch"));
        }
        let mut seen = vec![false; h * w];
        for &(i, j) in &self.omega {
            if i >= h || j >= w {
                return Err(Error::invalid(format!("observation ({i},{j}) outside {h}x{w}")));
            }
            if std::mem::replace(&mut seen[i * w + j], true) {
                return Err(Error::invalid(format!("duplicate observation ({i},{j})")));
            }
        }
        Ok(())
    }
}

struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    fn coords(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.h * self.w).map(move |p| {
            let (i, j) = (p / self.w, p % self.w);
            (
                p,
                (j as f64 + 0.5) / self.w as f64,
                (i as f64 + 0.5) / self.h as f64,
            )
        })
    }
}

/// Slanted plane from `near` to `far` along a random direction.
fn plane(rng: &mut ChaCha8Rng, grid: &Grid, near: f64, far: f64) -> Vec<f64> {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let span = 0.5 * (c.abs() + s.abs());
    grid.coords()
        .map(|(_, x, y)| {
            let t = ((x - 0.5) * c + (y - 0.5) * s) / (2.0 * span) + 0.5;
            near + (far - near) * t
        })
        .collect()
}

fn add_sphere(rng: &mut ChaCha8Rng, grid: &Grid, depth: &mut [f64]) {
    let cx = rng.gen_range(0.2..0.8);
    let cy = rng.gen_range(0.2..0.8);
    let radius = rng.gen_range(0.2..0.35);
    let (ci, cj) = (((cy * grid.h as f64) as usize).min(grid.h - 1), ((cx * grid.w as f64) as usize).min(grid.w - 1));
    let center = depth[ci * grid.w + cj] - rng.gen_range(0.05..0.3);
    let bulge = rng.gen_range(0.1..0.3);
    for (p, x, y) in grid.coords() {
        let r2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (radius * radius);
        if r2 < 1.0 {
            let d = center - bulge * (1.0 - r2).sqrt();
            depth[p] = depth[p].min(d);
        }
    }
}

fn steps(rng: &mut ChaCha8Rng, grid: &Grid) -> Vec<f64> {
    let bands = rng.gen_range(3..=4usize);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let span = 0.5 * (c.abs() + s.abs());
    // Band levels at least 0.8 m apart.
    let mut levels = Vec::with_capacity(bands);
    let mut level = rng.gen_range(0.7..1.5);
    for _ in 0..bands {
        levels.push(level);
        level += rng.gen_range(0.8..1.2);
    }
    if rng.gen_bool(0.5) {
        levels.reverse();
    }
    let slant = rng.gen_range(-0.3..0.3);
    grid.coords()
        .map(|(_, x, y)| {
            let t = (((x - 0.5) * c + (y - 0.5) * s) / (2.0 * span) + 0.5).clamp(0.0, 0.999_999);
            let band = (t * bands as f64) as usize;
            levels[band] + slant * (y - 0.5)
        })
        .collect()
}

/// Generates a scene of `kind` on an `h × w` grid, deterministic in all arguments.
pub fn generate_scene(kind: SceneKind, h: usize, w: usize, seed: u64) -> Result<SceneSample> {
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("scene must be at least 16x16, got {h}x{w}")));
    }
    let grid = Grid { h, w };
    let mut rng = rng_for(seed, kind.stream());
    let mut depth = match kind {
        SceneKind::Planes => {
            let near: f64 = rng.gen_range(0.6..1.5);
            let far = (near + rng.gen_range(3.0..7.0)).min(9.5);
            plane(&mut rng, &grid, near, far)
        }
        SceneKind::Spheres => {
            let near: f64 = rng.gen_range(0.8..2.0);
            let far = (near + rng.gen_range(3.0..6.0)).min(9.5);
            let mut d = plane(&mut rng, &grid, near, far);
            for _ in 0..rng.gen_range(1..=2) {
                add_sphere(&mut rng, &grid, &mut d);
            }
            d
        }
        SceneKind::Steps => steps(&mut rng, &grid),
        SceneKind::Mixed => {
            let near: f64 = rng.gen_range(0.8..2.0);
            let far = (near + rng.gen_range(3.0..6.0)).min(9.5);
            let mut d = plane(&mut rng, &grid, near, far);
            // A nearer fronto-parallel box.
            let (x0, y0) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
            let (bw, bh) = (rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5));
            let (bi, bj) = (
                (((y0 + bh / 2.0) * h as f64) as usize).min(h - 1),
                (((x0 + bw / 2.0) * w as f64) as usize).min(w - 1),
            );
            let box_depth = d[bi * w + bj] - rng.gen_range(0.15..0.35);
            for (p, x, y) in grid.coords() {
                if x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh {
                    d[p] = box_depth;
                }
            }
            add_sphere(&mut rng, &grid, &mut d);
            d
        }
    };
    depth
        .iter_mut()
        .for_each(|d| *d = d.clamp(DEPTH_MIN, DEPTH_MAX));
    let (image, gamma) = render_image(&depth, h, w, seed);
    Ok(SceneSample {
        kind,
        seed,
        image: Tensor::new(vec![h, w, 3], image)?,
        depth: Tensor::new(vec![h, w], depth)?,
        tone_gamma: gamma,
    })
}

/// Brightness code of a depth normalized to the scene range, `v ∈ [0, 1]`
/// with 0 nearest: `1 − v^γ`.
pub fn tone_code(v: f64, gamma: f64) -> f64 {
    1.0 - v.clamp(0.0, 1.0).powf(gamma)
}

/// Shading follows [`tone_code`] over the scene's own depth range with a
/// random exponent and tint, plus per-pixel texture noise. The image thus
/// fixes depth only up to a monotone per-scene curve. Pure in `(depth, seed)`.
fn render_image(depth: &[f64], h: usize, w: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = rng_for(seed, 0x1a6e);
    let gamma = rng.gen_range(TONE_GAMMA_MIN.ln()..=TONE_GAMMA_MAX.ln()).exp();
    let tint: [f64; 3] = [
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
    ];
    let noise = Normal::new(0.0, TEXTURE_NOISE).expect("valid sigma");
    debug_assert_eq!(depth.len(), h * w);
    let lo = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-9);
    let mut out = Vec::with_capacity(h * w * 3);
    for &d in depth {
        let shading = 0.08 + 0.84 * tone_code((d - lo) / range, gamma);
        for t in tint {
            out.push((shading * t + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    (out, gamma)
}

/// Samples `n` unique pixels uniformly and corrupts their depth as
/// `a*·D + b* + N(0, σ²)`.
pub fn sample_sparse(
    scene: &SceneSample,
    n: usize,
    sensor_scale: f64,
    sensor_shift: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SparseObservation> {
    let (h, w) = (scene.height(), scene.width());
    if n == 0 || n > h * w {
        return Err(Error::invalid(format!(
            "sparse sample count {n} outside 1..={}",
            h * w
        )));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    let mut rng = rng_for(seed, 0x5a3e);
    let mut flat = index::sample(&mut rng, h * w, n).into_vec();
    flat.sort_unstable();
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let depth = scene.depth.data();
    let values = flat
        .iter()
        .map(|&p| {
            let eta = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            sensor_scale * depth[p] + sensor_shift + eta
        })
        .collect();
    Ok(SparseObservation {
        omega: flat.iter().map(|&p| (p / w, p % w)).collect(),
        values,
        sensor_scale,
        sensor_shift,
        noise_sigma,
    })
}

/// Mean absolute and root-mean-square error over `mask` (flat indices), or
/// over all pixels when `mask` is `None`.
pub fn mae_rmse(pred: &Tensor, truth: &Tensor, mask: Option<&[usize]>) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "mae_rmse",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let (p, t) = (pred.data(), truth.data());
    let (abs, sq, n) = match mask {
        Some(m) => {
            if m.is_empty() {
                return Err(Error::invalid("empty evaluation mask"));
            }
            m.iter().try_fold((0.0, 0.0, 0usize), |(a, s, n), &k| {
                if k >= p.len() {
                    return Err(Error::invalid(format!("mask index {k} out of bounds")));
                }
                let e = p[k] - t[k];
                Ok((a + e.abs(), s + e * e, n + 1))
            })?
        }
        None => {
            if p.is_empty() {
                return Err(Error::invalid("empty evaluation mask"));
            }
            p.iter().zip(t).fold((0.0, 0.0, 0usize), |(a, s, n), (x, y)| {
                let e = x - y;
                (a + e.abs(), s + e * e, n + 1)
            })
        }
    };
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_scene_is_single_plane_in_range() {
        let s = generate_scene(SceneKind::Planes, 32, 32, 0).unwrap();
        let d = s.depth.data();
        assert!(d.iter().all(|&v| (DEPTH_MIN..=DEPTH_MAX).contains(&v)));
        // Second differences of a plane vanish along rows and columns.
        for i in 0..32 {
            for j in 1..31 {
                let dd = d[i * 32 + j - 1] - 2.0 * d[i * 32 + j] + d[i * 32 + j + 1];
                assert!(dd.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn steps_histogram_has_two_modes() {
        let s = generate_scene(SceneKind::Steps, 32, 32, 1).unwrap();
        let mut bins = [0usize; 20];
        for &v in s.depth.data() {
            bins[((v / DEPTH_MAX) * 19.999) as usize] += 1;
        }
        // Count separated runs of populated bins.
        let occupied: Vec<bool> = bins.iter().map(|&c| c > 0).collect();
        let runs = occupied
            .windows(2)
            .filter(|w| !w[0] && w[1])
            .count()
            + usize::from(occupied[0]);
        assert!(runs >= 2, "bins {bins:?}");
    }

    #[test]
    fn generation_is_deterministic_and_kind_dependent() {
        for kind in SceneKind::ALL {
            let a = generate_scene(kind, 32, 32, 7).unwrap();
            let b = generate_scene(kind, 32, 32, 7).unwrap();
            assert_eq!(a, b);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let a = generate_scene(SceneKind::Spheres, 32, 32, 7).unwrap();
        let b = generate_scene(SceneKind::Spheres, 32, 32, 8).unwrap();
        assert_ne!(a.depth, b.depth);
    }

    #[test]
    fn non_planar_kinds_have_discontinuities() {
        for kind in [SceneKind::Spheres, SceneKind::Steps, SceneKind::Mixed] {
            for seed in 0..5 {
                let s = generate_scene(kind, 32, 32, seed).unwrap();
                let d = s.depth.data();
                let max_jump = (0..32 * 31)
                    .map(|p| (d[p] - d[p + 32]).abs())
                    .chain((0..32 * 32).filter(|p| p % 32 != 31).map(|p| (d[p] - d[p + 1]).abs()))
                    .fold(0.0, f64::max);
                assert!(max_jump > 0.3, "{kind} seed {seed}: {max_jump}");
            }
        }
    }

    #[test]
    fn rejects_small_grid_and_unknown_kind() {
        assert!(generate_scene(SceneKind::Planes, 8, 32, 0).is_err());
        assert!("cubes".parse::<SceneKind>().is_err());
        assert_eq!("mixed".parse::<SceneKind>().unwrap(), SceneKind::Mixed);
    }

    #[test]
    fn full_identity_sampling_reproduces_depth() {
        let s = generate_scene(SceneKind::Mixed, 16, 16, 3).unwrap();
        let obs = sample_sparse(&s, 256, 1.0, 0.0, 0.0, 9).unwrap();
        let flat = obs.flat_indices(16);
        for (k, &p) in flat.iter().enumerate() {
            assert_eq!(obs.values[k], s.depth.data()[p]);
        }
        assert!(sample_sparse(&s, 257, 1.0, 0.0, 0.0, 9).is_err());
    }

    #[test]
    fn noiseless_corruption_is_recovered_by_least_squares() {
        let s = generate_scene(SceneKind::Spheres, 32, 32, 4).unwrap();
        let obs = sample_sparse(&s, 100, 2.0, 1.0, 0.0, 11).unwrap();
        let x: Vec<f64> = obs.flat_indices(32).iter().map(|&p| s.depth.data()[p]).collect();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, obs.values.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&obs.values).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let a = sxy / sxx;
        let b = my - a * mx;
        assert!((a - 2.0).abs() < 1e-10 && (b - 1.0).abs() < 1e-10);
    }

    #[test]
    fn five_points_are_unique() {
        let s = generate_scene(SceneKind::Steps, 32, 32, 2).unwrap();
        let obs = sample_sparse(&s, 5, 1.25, 0.4, 0.01, 3).unwrap();
        assert_eq!(obs.len(), 5);
        obs.validate(32, 32).unwrap();
    }

    #[test]
    fn metrics_examples() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mae_rmse(&t, &t, None).unwrap(), (0.0, 0.0));
        let p = t.map(|x| x + 1.0);
        assert_eq!(mae_rmse(&p, &t, None).unwrap(), (1.0, 1.0));
        let p = Tensor::vector(vec![1.0, 5.0, 0.0, 4.0]);
        let (mae, rmse) = mae_rmse(&p, &t, None).unwrap();
        assert!((mae - 1.5).abs() < 1e-15);
        assert!((rmse - 4.5f64.sqrt()).abs() < 1e-15);
        assert!(mae_rmse(&p, &t, Some(&[])).is_err());
        assert!(mae_rmse(&p, &Tensor::zeros(&[3]), None).is_err());
    }
}

//! Per-scene PCA of decoder features and subspace projections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::spectral::{jacobi_eigen, random_orthonormal};
use crate::error::{Error, Result};
use crate::model::FeatureProjector;
use crate::tensor::Tensor;
use crate::world::rng_for;

/// Channel mean and covariance (normalized by the number of positions) of
/// one or more `[positions, C]` feature matrices.
pub fn channel_covariance(sets: &[&Tensor]) -> Result<(Vec<f64>, Tensor)> {
    let c = sets
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| Error::invalid("no features for covariance"))?;
    if sets.iter().any(|t| t.rank() != 2 || t.cols() != c) {
        return Err(Error::invalid("feature sets disagree on channel count"));
    }
    let n: usize = sets.iter().map(|t| t.rows()).sum();
    if n == 0 {
        return Err(Error::invalid("no feature positions"));
    }
    let mut mean = vec![0.0; c];
    for t in sets {
        for p in 0..t.rows() {
            mean.iter_mut().zip(t.row(p)).for_each(|(m, x)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Tensor::zeros(&[c, c]);
    for t in sets {
        for p in 0..t.rows() {
            let centered: Vec<f64> = t.row(p).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..c {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let row = &mut cov.data_mut()[i * c..(i + 1) * c];
                row.iter_mut().zip(&centered).for_each(|(r, cj)| *r += ci * cj);
            }
        }
    }
    let cov = cov.scaled(1.0 / n as f64);
    Ok((mean, cov))
}

/// PCA of a feature map over its spatial positions.
#[derive(Clone, Debug)]
pub struct FeaturePca {
    pub mean: Vec<f64>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// All eigenvectors as columns, `C × C`.
    pub basis: Tensor,
}

impl FeaturePca {
    /// First `k` principal directions as a `C × k` matrix.
    pub fn top_k(&self, k: usize) -> Tensor {
        let c = self.basis.rows();
        let mut t = Tensor::zeros(&[c, k]);
        for i in 0..c {
            for j in 0..k {
                t.set(i, j, self.basis.at(i, j));
            }
        }
        t
    }

    /// Share of total variance in the top `k` components.
    pub fn top_k_energy(&self, k: usize) -> f64 {
        super::spectral::energy_of_values(&self.eigenvalues, k)
    }
}

pub fn feature_pca(sets: &[&Tensor]) -> Result<FeaturePca> {
    let (mean, cov) = channel_covariance(sets)?;
    let total: f64 = (0..cov.rows()).map(|i| cov.at(i, i)).sum();
    if total <= 0.0 {
        return Err(Error::invalid("zero-variance features"));
    }
    let eig = jacobi_eigen(&cov)?;
    Ok(FeaturePca {
        mean,
        eigenvalues: eig.values,
        basis: eig.left,
    })
}

/// PC1 spatial map plus the top-`k` basis of a `[positions, C]` feature map.
#[derive(Clone, Debug)]
pub struct Pc1Map {
    /// `[grid_h, grid_w]` projections of centered features onto PC1.
    pub map: Tensor,
    /// `C × k` orthonormal basis.
    pub basis: Tensor,
    pub pca: FeaturePca,
}

pub fn pca_pc1_map(features: &Tensor, grid: (usize, usize), k: usize) -> Result<Pc1Map> {
    if features.rank() != 2 || features.cols() < 2 {
        return Err(Error::invalid("PC1 map needs at least two channels"));
    }
    if features.rows() != grid.0 * grid.1 {
        return Err(Error::Shape {
            op: "pca_pc1_map",
            lhs: features.shape().to_vec(),
            rhs: vec![grid.0, grid.1],
        });
    }
    if k == 0 || k > features.cols() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", features.cols())));
    }
    let pca = feature_pca(&[features])?;
    let c = features.cols();
    let pc1: Vec<f64> = (0..c).map(|i| pca.basis.at(i, 0)).collect();
    let map = (0..features.rows())
        .map(|p| {
            features
                .row(p)
                .iter()
                .zip(&pca.mean)
                .zip(&pc1)
                .map(|((x, m), v)| (x - m) * v)
                .sum()
        })
        .collect();
    Ok(Pc1Map {
        map: Tensor::new(vec![grid.0, grid.1], map)?,
        basis: pca.top_k(k),
        pca,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    None,
    TopK,
    OrthogonalToTopK,
    RandomK,
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::None => "none",
            ProjectionMode::TopK => "top",
            ProjectionMode::OrthogonalToTopK => "orth",
            ProjectionMode::RandomK => "rand",
        })
    }
}

/// Decoder stage projected by default: the first one at full resolution.
pub const DEFAULT_PROJECTION_STAGE: usize = 2;

/// Which subspace decoder features are confined to during adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub mode: ProjectionMode,
    pub k: usize,
    /// Decoder stage whose output is projected and whose covariance defines the PCs.
    pub stage: usize,
    pub seed: u64,
}

impl ProjectionSpec {
    pub fn none() -> Self {
        ProjectionSpec {
            mode: ProjectionMode::None,
            k: 0,
            stage: DEFAULT_PROJECTION_STAGE,
            seed: 0,
        }
    }

    /// Row label such as `none`, `top_8`, `orth_8`, `rand_16`.
    pub fn label(&self) -> String {
        match self.mode {
            ProjectionMode::None => "none".to_string(),
            m => format!("{m}_{}", self.k),
        }
    }
}

impl FromStr for ProjectionSpec {
    type Err = Error;

    /// Parses labels produced by [`ProjectionSpec::label`], at the default stage with seed 0.
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(ProjectionSpec::none());
        }
        let (mode, k) = s
            .split_once('_')
            .ok_or_else(|| Error::invalid(format!("bad projection `{s}`")))?;
        let mode = match mode {
            "top" => ProjectionMode::TopK,
            "orth" => ProjectionMode::OrthogonalToTopK,
            "rand" => ProjectionMode::RandomK,
            _ => return Err(Error::invalid(format!("bad projection mode in `{s}`"))),
        };
        let k = k
            .parse()
            .map_err(|_| Error::invalid(format!("bad projection dimension in `{s}`")))?;
        Ok(ProjectionSpec {
            mode,
            k,
            stage: DEFAULT_PROJECTION_STAGE,
            seed: 0,
        })
    }
}

/// Builds the fixed projector `x ↦ (x − μ)·Q + μ` for `spec` from the
/// covariance of `sets` (one set per scene; several pool a population basis).
/// Returns `None` for mode `none`.
pub fn build_projector(spec: &ProjectionSpec, sets: &[&Tensor]) -> Result<Option<FeatureProjector>> {
    if spec.mode == ProjectionMode::None {
        return Ok(None);
    }
    let pca = feature_pca(sets)?;
    let c = pca.mean.len();
    if spec.k == 0 || spec.k > c {
        return Err(Error::invalid(format!("projection k = {} outside 1..={c}", spec.k)));
    }
    let q = match spec.mode {
        ProjectionMode::TopK => projector_matrix(&pca.top_k(spec.k)),
        ProjectionMode::OrthogonalToTopK => {
            Tensor::identity(c).sub(&projector_matrix(&pca.top_k(spec.k)))?
        }
        ProjectionMode::RandomK => {
            let mut rng = rng_for(spec.seed, 0x7a4d);
            projector_matrix(&random_orthonormal(c, spec.k, &mut rng)?)
        }
        ProjectionMode::None => unreachable!("handled above"),
    };
    let mean = Tensor::matrix(1, c, pca.mean.clone())?;
    let mq = mean.matmul(&q)?;
    let offset = Tensor::vector(pca.mean.iter().zip(mq.data()).map(|(m, x)| m - x).collect());
    Ok(Some(FeatureProjector {
        stage: spec.stage,
        matrix: q,
        offset,
    }))
}

/// `P Pᵀ` for orthonormal columns `P`.
pub fn projector_matrix(p: &Tensor) -> Tensor {
    p.matmul(&p.transpose()).expect("conformable")
}

/// Applies a projector to a `[positions, C]` feature matrix.
pub fn project_features(features: &Tensor, projector: Option<&FeatureProjector>) -> Result<Tensor> {
    let Some(p) = projector else {
        return Ok(features.clone());
    };
    let mut out = features.matmul(&p.matrix)?;
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        row.iter_mut().zip(p.offset.data()).for_each(|(x, o)| *x += o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::spectral::orthonormality_error;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 1);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
            .unwrap()
    }

    fn spec(mode: ProjectionMode, k: usize) -> ProjectionSpec {
        ProjectionSpec {
            mode,
            k,
            stage: 0,
            seed: 3,
        }
    }

    #[test]
    fn replicated_depth_pc1_is_centered_depth() {
        let depth: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 * 0.3 + 1.0).collect();
        let f = Tensor::matrix(64, 4, depth.iter().flat_map(|&d| [d; 4]).collect()).unwrap();
        let r = pca_pc1_map(&f, (8, 8), 2).unwrap();
        let mean = depth.iter().sum::<f64>() / 64.0;
        let ratio = r.map.data()[0] / (depth[0] - mean);
        for (m, d) in r.map.data().iter().zip(&depth) {
            assert!((m - ratio * (d - mean)).abs() < 1e-10);
        }
        assert!((ratio.abs() - 2.0).abs() < 1e-10);
        assert!(orthonormality_error(&r.basis) < 1e-10);
    }

    #[test]
    fn isotropic_noise_spreads_energy() {
        let mut total = 0.0;
        for seed in 0..20 {
            let f = noise(2000, 8, seed);
            total += feature_pca(&[&f]).unwrap().top_k_energy(1);
        }
        let mean = total / 20.0;
        // Largest of 8 nearly equal eigenvalues: slightly above 1/8.
        assert!(mean > 0.125 && mean < 0.16, "{mean}");
    }

    #[test]
    fn zero_variance_is_an_error() {
        let f = Tensor::full(&[16, 3], 2.0);
        assert!(pca_pc1_map(&f, (4, 4), 1).is_err());
    }

    #[test]
    fn projection_examples() {
        let f = noise(64, 16, 4);
        assert_eq!(project_features(&f, None).unwrap(), f);
        assert!(build_projector(&ProjectionSpec::none(), &[&f]).unwrap().is_none());

        let full = build_projector(&spec(ProjectionMode::TopK, 16), &[&f]).unwrap();
        let out = project_features(&f, full.as_ref()).unwrap();
        assert!(out.sub(&f).unwrap().max_abs() < 1e-12);

        let top = build_projector(&spec(ProjectionMode::TopK, 8), &[&f]).unwrap();
        let orth = build_projector(&spec(ProjectionMode::OrthogonalToTopK, 8), &[&f]).unwrap();
        let a = project_features(&f, top.as_ref()).unwrap();
        let b = project_features(&f, orth.as_ref()).unwrap();
        // Complementary projectors: (x−μ)P + μ + (x−μ)(I−P) + μ = x + μ.
        let mean = channel_covariance(&[&f]).unwrap().0;
        for p in 0..64 {
            for c in 0..16 {
                let sum = a.at(p, c) + b.at(p, c) - mean[c];
                assert!((sum - f.at(p, c)).abs() < 1e-10);
            }
        }
        let twice = project_features(&a, top.as_ref()).unwrap();
        assert!(twice.sub(&a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn random_projector_is_rank_k() {
        let f = noise(64, 16, 5);
        let p = build_projector(&spec(ProjectionMode::RandomK, 4), &[&f]).unwrap().unwrap();
        let s = crate::analysis::spectral::svd(&p.matrix).unwrap().values;
        assert!(s[..4].iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(s[4..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn labels_round_trip() {
        for s in ["none", "top_8", "orth_16", "rand_8"] {
            assert_eq!(s.parse::<ProjectionSpec>().unwrap().label(), s);
        }
        assert!("top".parse::<ProjectionSpec>().is_err());
        assert!("side_3".parse::<ProjectionSpec>().is_err());
    }
}

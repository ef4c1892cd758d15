//! Non-flatness score, Fréchet distance between gaussian feature statistics,
//! and density-based instance selection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::adversary::Generator;
use crate::camera::{build_view, CameraMap, CameraPrior};
use crate::error::{invalid, shape_err, Error, Result};
use crate::math;
use crate::render::{gen_rays, integrate, sample_field, PatchSpec, RenderConfig, TriPlaneField};

pub const NFS_BINS: usize = 64;
pub const NFS_MAPS: usize = 256;
/// Fraction of the lowest-density quadrature samples zeroed before
/// integrating an evaluation render.
pub const CULL_FRACTION: f64 = 0.5;

/// Counts of depth values in `[-1, 1]` over equal bins; values outside are
/// clamped into the edge bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthHistogram {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl DepthHistogram {
    pub fn new(depth: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(invalid("a depth histogram needs at least two bins"));
        }
        if depth.is_empty() {
            return Err(Error::EmptyDepth);
        }
        let mut counts = vec![0; bins];
        for &d in depth {
            if d.is_nan() {
                return Err(Error::NonFinite { term: "depth".into(), value: d });
            }
            let u = (d.clamp(-1.0, 1.0) + 1.0) * 0.5 * bins as f64;
            counts[(u as usize).min(bins - 1)] += 1;
        }
        Ok(Self { counts, total: depth.len() })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Shannon entropy in nats of the normalized histogram.
    pub fn entropy(&self) -> f64 {
        let n = self.total as f64;
        -self.counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| p * math::ln(p)).sum::<f64>()
    }

    /// Effective number of occupied bins, in `[1, bins]`.
    pub fn exp_entropy(&self) -> f64 {
        math::exp(self.entropy()).clamp(1.0, self.bins() as f64)
    }
}

/// Maps `[t_near, t_far]` onto `[-1, 1]`.
pub fn normalize_near_far(depth: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    depth.iter().map(|d| 2.0 * (d - t_near) / (t_far - t_near) - 1.0).collect()
}

/// Mean exponentiated histogram entropy over `n` normalized depth maps drawn
/// from `sampler(i)`.
pub fn nfs<F>(n: usize, bins: usize, mut sampler: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(invalid("nfs needs at least one depth map"));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += DepthHistogram::new(&sampler(i)?, bins)?.exp_entropy();
    }
    Ok(acc / n as f64)
}

/// Zeroes the `floor(fraction * len)` smallest values (ties broken by index).
pub fn cull_lowest(values: &mut [f64], fraction: f64) {
    let k = ((fraction.clamp(0.0, 1.0) * values.len() as f64) as usize).min(values.len());
    if k == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    for &i in &order[..k] {
        values[i] = 0.0;
    }
}

/// Depth map `[res * res]` of one generated scene seen from the prior's
/// frontal camera. The lowest-density half of the quadrature samples is
/// zeroed, and transmittance left at the far bound is assigned the far depth.
pub fn frontal_depth<C: CameraMap>(
    g: &Generator<C>,
    render: &RenderConfig,
    prior: &CameraPrior,
    res: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..g.mapping.z_dim()).map(|_| math::std_normal(rng)).collect();
    let class = rng.random_range(0..g.mapping.n_classes);
    let planes = g.synthesis.synthesize(&g.mapping.map(&z, class)?)?;
    let phi = prior.frontal();
    let view = build_view(&phi, prior.outer_radius)?;
    let rays = gen_rays(&view, phi.0[crate::camera::FOV], &PatchSpec::full(res, res), render)?;
    let field = TriPlaneField::new(&planes, &g.decoder, render);
    let mut grid = sample_field(&field, &rays, render.n_steps, None)?;
    cull_lowest(&mut grid.sigma, CULL_FRACTION);
    let out = integrate(&grid, render.background);
    Ok(out.depth.iter().zip(&out.weight).map(|(d, w)| d + (1.0 - w) * render.t_far).collect())
}

/// NFS of a generator over `n` frontal renders at `res x res`.
pub fn generator_nfs<C: CameraMap>(
    g: &Generator<C>,
    render: &RenderConfig,
    prior: &CameraPrior,
    res: usize,
    n: usize,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    nfs(n, bins, |_| {
        let d = frontal_depth(g, render, prior, res, rng)?;
        Ok(normalize_near_far(&d, render.t_near, render.t_far))
    })
}

pub const DEFAULT_EPS: f64 = 1e-6;

/// Mean and regularized covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn as_matrix(features: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    if dim == 0 || features.is_empty() || !features.len().is_multiple_of(dim) {
        return Err(shape_err("features", format!("{} values for dimension {dim}", features.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(invalid("features contain non-finite values"));
    }
    Ok(DMatrix::from_row_slice(features.len() / dim, dim, features))
}

impl FeatureStats {
    /// `features` is `[N, dim]` row-major; covariance uses the `N - 1`
    /// normalization (`N` when `N = 1`) plus `eps * I`.
    pub fn from_features(features: &[f64], dim: usize, eps: f64) -> Result<Self> {
        let x = as_matrix(features, dim)?;
        Self::from_matrix(&x, eps)
    }

    fn from_matrix(x: &DMatrix<f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(invalid("eps must be nonnegative"));
        }
        let n = x.nrows();
        let mean = x.row_mean().transpose();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = c.transpose() * &c / denom;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..cov.nrows() {
            cov[(i, i)] += eps;
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const EIG_EPS: f64 = 1e-14;
const EIG_ITERS: usize = 10_000;

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, EIG_EPS, EIG_ITERS).ok_or(Error::NoConvergence)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the square root taken from the eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err("frechet_distance", format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let ea = sym_eigen(a.cov.clone())?;
    let roots = ea.eigenvalues.map(|l| math::sqrt(l.max(0.0)));
    let sa = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let m = &sa * &b.cov * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = sym_eigen(m)?.eigenvalues.iter().map(|l| math::sqrt(l.max(0.0))).sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Indices (ascending) of the `ceil(q N)` samples with the highest density
/// under a gaussian fit with covariance `S + eps I`; ties keep the earlier
/// sample.
pub fn instance_select(features: &[f64], dim: usize, keep_fraction: f64, eps: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid(format!("keep fraction must be in (0, 1], got {keep_fraction}")));
    }
    let x = as_matrix(features, dim)?;
    let n = x.nrows();
    let keep = (math::ceil(keep_fraction * n as f64) as usize).clamp(1, n);
    if keep == n {
        return Ok((0..n).collect());
    }
    let stats = FeatureStats::from_matrix(&x, eps)?;
    let chol = stats.cov.clone().cholesky().ok_or_else(|| invalid("covariance is not positive definite; increase eps"))?;
    let maha: Vec<f64> = (0..n)
        .map(|i| {
            let d = x.row(i).transpose() - &stats.mean;
            d.dot(&chol.solve(&d))
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| maha[a].total_cmp(&maha[b]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

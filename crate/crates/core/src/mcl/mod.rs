//! Monte Carlo localization against a known occupancy grid.

mod field;

use std::io::Write;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use field::{build_likelihood_field, LikelihoodField};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, circular_mean, normalize_angle, Pose2D};
use crate::grid::OccupancyGrid;
use crate::sim::sensors::{sample_odometry, LidarScan, OdometryDelta, OdometryNoise};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pose: Pose2D,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Set when the last weighting step found no support and reset to uniform.
    pub degenerate: bool,
}

impl ParticleSet {
    pub fn uniform(poses: impl IntoIterator<Item = Pose2D>) -> Self {
        let poses: Vec<Pose2D> = poses.into_iter().collect();
        let w = 1.0 / poses.len().max(1) as f64;
        Self {
            particles: poses.into_iter().map(|pose| Particle { pose, weight: w }).collect(),
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    /// One record per particle, newline-delimited JSON.
    pub fn dump<W: Write>(&self, stamp: f64, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            t: f64,
            #[serde(flatten)]
            particle: &'a Particle,
        }
        for p in &self.particles {
            serde_json::to_writer(&mut out, &Row { t: stamp, particle: p })?;
            out.write_all(b"\n").map_err(|e| Error::io("<particle dump>", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MclParams {
    pub particles: usize,
    pub sigma_hit: f64,
    pub z_rand: f64,
    pub max_dist: f64,
    pub beam_stride: usize,
    pub resample_threshold: f64,
    pub motion_noise: OdometryNoise,
    pub heading_variance_floor: f64,
}

impl Default for MclParams {
    fn default() -> Self {
        Self {
            particles: 500,
            sigma_hit: 0.1,
            z_rand: 0.05,
            max_dist: 1.0,
            beam_stride: 4,
            resample_threshold: 0.5,
            motion_noise: OdometryNoise::default(),
            heading_variance_floor: 1e-6,
        }
    }
}

impl MclParams {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.beam_stride == 0 {
            return Err(Error::Config("particle count and beam stride must be positive".into()));
        }
        if !(self.sigma_hit > 0.0 && self.max_dist > 0.0) {
            return Err(Error::Config("sigma_hit and max_dist must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.z_rand) || !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config("z_rand and resample_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclEstimate {
    pub mean: Pose2D,
    pub covariance: Matrix3<f64>,
    pub effective_sample_size: f64,
    pub stamp: f64,
}

/// Moves every particle by an independently perturbed copy of `delta`.
pub fn predict<R: Rng + ?Sized>(set: &ParticleSet, delta: &OdometryDelta, noise: &OdometryNoise, rng: &mut R) -> Result<ParticleSet> {
    let mut out = set.clone();
    for p in &mut out.particles {
        let d = sample_odometry(delta, noise, rng)?;
        p.pose = p.pose.compose(&d.as_pose());
    }
    Ok(out)
}

/// Log-likelihood of a scan from `pose`, summed over every `stride`-th returning beam.
pub fn scan_log_likelihood(pose: &Pose2D, scan: &LidarScan, field: &LikelihoodField, z_rand: f64, stride: usize) -> f64 {
    let (s, c) = pose.theta.sin_cos();
    scan.endpoints(stride)
        .map(|(_, bx, by)| {
            let x = pose.x + c * bx - s * by;
            let y = pose.y + s * bx + c * by;
            ((1.0 - z_rand) * field.value_at(x, y) + z_rand).ln()
        })
        .sum()
}

/// Measurement update. Weights are combined in the log domain and renormalized.
pub fn weight(set: &ParticleSet, scan: &LidarScan, field: &LikelihoodField, params: &MclParams) -> ParticleSet {
    let logs: Vec<f64> = set
        .particles
        .par_iter()
        .map(|p| {
            if p.weight > 0.0 {
                p.weight.ln() + scan_log_likelihood(&p.pose, scan, field, params.z_rand, params.beam_stride)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = set.clone();
    if !max.is_finite() {
        let w = 1.0 / out.len() as f64;
        out.particles.iter_mut().for_each(|p| p.weight = w);
        out.degenerate = true;
        return out;
    }
    let mut total = 0.0;
    for (p, l) in out.particles.iter_mut().zip(&logs) {
        p.weight = (l - max).exp();
        total += p.weight;
    }
    out.particles.iter_mut().for_each(|p| p.weight /= total);
    out.degenerate = false;
    out
}

/// Systematic resampling with the single draw `u ∈ [0, 1)`: output `i` picks the
/// particle whose cumulative-weight interval contains `(u + i) / n_out`.
pub fn systematic_resample(weights: &[f64], n_out: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n_out);
    let mut j = 0;
    let mut cum = weights.first().copied().unwrap_or(0.0) / total;
    for i in 0..n_out {
        let target = (u + i as f64) / n_out as f64;
        while target >= cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    out
}

/// Resamples when the effective sample size drops below `threshold · N`.
pub fn resample<R: Rng + ?Sized>(set: &ParticleSet, threshold: f64, rng: &mut R) -> ParticleSet {
    let n = set.len();
    if n == 0 || set.effective_sample_size() >= threshold * n as f64 {
        return set.clone();
    }
    let weights: Vec<f64> = set.particles.iter().map(|p| p.weight).collect();
    let u: f64 = rng.random();
    let w = 1.0 / n as f64;
    ParticleSet {
        particles: systematic_resample(&weights, n, u)
            .into_iter()
            .map(|i| Particle {
                pose: set.particles[i].pose,
                weight: w,
            })
            .collect(),
        degenerate: set.degenerate,
    }
}

/// Weighted mean (circular for heading) and covariance with wrapped heading residuals.
pub fn estimate(set: &ParticleSet, stamp: f64) -> MclEstimate {
    let total = set.weight_sum();
    let (mut mx, mut my) = (0.0, 0.0);
    for p in &set.particles {
        mx += p.weight * p.pose.x;
        my += p.weight * p.pose.y;
    }
    mx /= total;
    my /= total;
    let mt = circular_mean(set.particles.iter().map(|p| (p.pose.theta, p.weight)));
    let mut cov = Matrix3::zeros();
    for p in &set.particles {
        let r = Vector3::new(p.pose.x - mx, p.pose.y - my, angle_diff(p.pose.theta, mt));
        cov += (p.weight / total) * r * r.transpose();
    }
    cov = 0.5 * (cov + cov.transpose());
    let ess = (total * total / set.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()).clamp(1.0, set.len() as f64);
    MclEstimate {
        mean: Pose2D::new(mx, my, mt),
        covariance: cov,
        effective_sample_size: ess,
        stamp,
    }
}

/// Square-root factor of a PSD matrix; errors when an eigenvalue is clearly negative.
pub fn psd_sqrt(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    if (cov - cov.transpose()).amax() > 1e-9 * (1.0 + cov.amax()) {
        return Err(Error::NotPositiveSemidefinite);
    }
    let eig = SymmetricEigen::new(0.5 * (cov + cov.transpose()));
    let tol = 1e-12 * (1.0 + cov.amax());
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::NotPositiveSemidefinite);
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&sqrt))
}

/// `n` particles drawn from a Gaussian around `pose`, uniform weights.
pub fn initialize<R: Rng + ?Sized>(pose: &Pose2D, covariance: &Matrix3<f64>, n: usize, rng: &mut R) -> Result<ParticleSet> {
    let l = psd_sqrt(covariance)?;
    if !pose.is_finite() {
        return Err(Error::NonFinite("initial pose"));
    }
    let poses = (0..n).map(|_| {
        let z = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let d = l * z;
        Pose2D::new(pose.x + d[0], pose.y + d[1], pose.theta + d[2])
    });
    Ok(ParticleSet::uniform(poses.collect::<Vec<_>>()))
}

/// `n` particles uniform over the free cells of `grid` inside `region`, uniform heading.
pub fn initialize_uniform<R: Rng + ?Sized>(
    grid: &OccupancyGrid,
    region: &[crate::sim::world::Rect],
    n: usize,
    rng: &mut R,
) -> Result<ParticleSet> {
    let cells: Vec<(f64, f64)> = (0..grid.width() * grid.height())
        .map(|i| grid.cell_of_index(i))
        .filter(|&c| !grid.is_occupied(c))
        .map(|c| grid.cell_center(c))
        .filter(|&(x, y)| region.iter().any(|r| r.contains(x, y)))
        .collect();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no free cells in the initialization region".into()));
    }
    let h = grid.resolution() / 2.0;
    let poses: Vec<Pose2D> = (0..n)
        .map(|_| {
            let (x, y) = cells[rng.random_range(0..cells.len())];
            Pose2D::new(
                x + rng.random_range(-h..h),
                y + rng.random_range(-h..h),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            )
        })
        .collect();
    Ok(ParticleSet::uniform(poses))
}

/// Stateful filter: field, particles and a private random stream.
#[derive(Debug, Clone)]
pub struct MonteCarloLocalizer<R> {
    field: std::sync::Arc<LikelihoodField>,
    params: MclParams,
    set: ParticleSet,
    rng: R,
    last: Option<MclEstimate>,
    updates: usize,
}

impl<R: Rng> MonteCarloLocalizer<R> {
    pub fn new(field: std::sync::Arc<LikelihoodField>, params: MclParams, rng: R) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            field,
            params,
            set: ParticleSet::uniform(Vec::new()),
            rng,
            last: None,
            updates: 0,
        })
    }

    pub fn params(&self) -> &MclParams {
        &self.params
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    pub fn is_initialized(&self) -> bool {
        !self.set.is_empty()
    }

    /// Scan updates since the last (re)initialization.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn last_estimate(&self) -> Option<&MclEstimate> {
        self.last.as_ref()
    }

    pub fn initialize(&mut self, pose: &Pose2D, covariance: &Matrix3<f64>) -> Result<()> {
        self.set = initialize(pose, covariance, self.params.particles, &mut self.rng)?;
        self.last = None;
        self.updates = 0;
        Ok(())
    }

    pub fn initialize_uniform(&mut self, grid: &OccupancyGrid, region: &[crate::sim::world::Rect]) -> Result<()> {
        self.set = initialize_uniform(grid, region, self.params.particles, &mut self.rng)?;
        self.last = None;
        self.updates = 0;
        Ok(())
    }

    pub fn predict(&mut self, delta: &OdometryDelta) -> Result<()> {
        if self.is_initialized() {
            self.set = predict(&self.set, delta, &self.params.motion_noise, &mut self.rng)?;
        }
        Ok(())
    }

    /// Weight, estimate, then resample; returns the pre-resampling estimate.
    pub fn update(&mut self, scan: &LidarScan) -> Result<MclEstimate> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized);
        }
        self.set = weight(&self.set, scan, &self.field, &self.params);
        let mut est = estimate(&self.set, scan.stamp);
        est.covariance[(2, 2)] = est.covariance[(2, 2)].max(self.params.heading_variance_floor);
        self.set = resample(&self.set, self.params.resample_threshold, &mut self.rng);
        self.last = Some(est);
        self.updates += 1;
        Ok(est)
    }

    /// Estimate of the current cloud without weighting it against a scan.
    pub fn current_estimate(&self, stamp: f64) -> Result<MclEstimate> {
        if !self.is_initialized() {
            return Err(Error::Uninitialized);
        }
        let mut est = estimate(&self.set, stamp);
        est.covariance[(2, 2)] = est.covariance[(2, 2)].max(self.params.heading_variance_floor);
        Ok(est)
    }

    pub fn is_degenerate(&self) -> bool {
        self.set.degenerate
    }

    /// Mean heading of the cloud (circular).
    pub fn heading(&self) -> f64 {
        normalize_angle(circular_mean(self.set.particles.iter().map(|p| (p.pose.theta, p.weight))))
    }
}

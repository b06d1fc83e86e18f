//! Particle filter over unit reward-weight vectors.
//!
//! Each observed constraint is turned into a likelihood that is flat on the
//! consistent hemisphere and decays like a von Mises-Fisher density on the
//! inconsistent one, the two branches meeting continuously at the great
//! circle. Weights are multiplied by it; a heavy collapse triggers a reset,
//! low effective sample size triggers KLD-sized systematic resampling with
//! vMF jitter. Diverse beliefs are drawn from the cloud with a greedy
//! farthest-point (2-approximate k-center) selection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bec::{ConstraintSet, HalfSpaceConstraint};
use crate::error::{Error, Result};
use crate::mdp::RewardWeights;
use crate::scalar::Scalar;
use crate::sphere::{equal_area_bin, sample_uniform, sample_vmf, Vec3};

pub const PF_SCHEMA: &str = "pf/v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Particle<T> {
    pub position: Vec3<T>,
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ParticleSet<T> {
    pub particles: Vec<Particle<T>>,
    pub normalized: bool,
    /// Region the filter was initialized on; resets fall back to it.
    pub prior: ConstraintSet<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Initial particle count (and the size of a reset).
    pub n: usize,
    /// Reset when the observation keeps less than this fraction of the
    /// mass it would keep if every particle were consistent.
    pub reset_threshold: f64,
    /// Resample when n_eff < ess_fraction * current particle count.
    pub ess_fraction: f64,
    /// Likelihood concentration on the inconsistent side.
    pub kappa: f64,
    pub kld_epsilon: f64,
    pub kld_delta: f64,
    /// Equal-area bins per axis; `bin_resolution^2` bins in total.
    pub bin_resolution: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// vMF concentration of post-resample jitter; 0 disables jitter.
    pub jitter_kappa: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            reset_threshold: 1e-3,
            ess_fraction: 0.5,
            kappa: 2.0,
            kld_epsilon: 0.05,
            kld_delta: 0.01,
            bin_resolution: 12,
            n_min: 100,
            n_max: 5000,
            jitter_kappa: 500.0,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n == 0 {
            errs.push("filter.n must be positive".to_string());
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            errs.push(format!("filter.ess_fraction {} outside (0, 1]", self.ess_fraction));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("kld_epsilon", self.kld_epsilon),
            ("kld_delta", self.kld_delta),
            ("reset_threshold", self.reset_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("filter.{name} must be positive, got {v}"));
            }
        }
        if self.kld_delta >= 1.0 {
            errs.push("filter.kld_delta must be below 1".into());
        }
        if self.jitter_kappa < 0.0 {
            errs.push("filter.jitter_kappa must be nonnegative".into());
        }
        if self.bin_resolution == 0 {
            errs.push("filter.bin_resolution must be positive".into());
        }
        if !(self.n_min >= 1 && self.n_min <= self.n && self.n <= self.n_max) {
            errs.push(format!(
                "filter particle counts must satisfy 1 <= n_min ({}) <= n ({}) <= n_max ({})",
                self.n_min, self.n, self.n_max
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Parameters of the uniform + vMF likelihood for one constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CustomDistParams<T> {
    pub mu: Vec3<T>,
    pub kappa: T,
    pub c1: T,
    pub c2: T,
}

impl<T: Scalar> CustomDistParams<T> {
    /// `c2` matches the vMF branch to the uniform one on the great circle,
    /// `c1` then normalizes the total mass to one.
    pub fn new(mu: Vec3<T>, kappa: T) -> Self {
        let (c1, c2) = custom_constants(kappa);
        Self { mu, kappa, c1, c2 }
    }
}

/// `(c1, c2)` for concentration `kappa`:
/// `c2 = (e^k - e^-k) / k` and `c1 = 1 + (1 - e^-k) / k`.
pub fn custom_constants<T: Scalar>(kappa: T) -> (T, T) {
    let c2 = (kappa.exp() - (-kappa).exp()) / kappa;
    let c1 = T::one() + (T::one() - (-kappa).exp()) / kappa;
    (c1, c2)
}

/// Likelihood density at `x` given the constraint direction in `params`.
pub fn custom_pdf<T: Scalar>(x: &Vec3<T>, p: &CustomDistParams<T>) -> T {
    let two_pi = T::lit(2.0) * T::PI();
    let uniform = T::one() / (two_pi * p.c1);
    let m = p.mu.dot(x);
    if m >= T::zero() {
        return uniform;
    }
    // c2 k e^{k m} / (2 c1 pi (e^k - e^-k)); the c2 factor cancels the
    // normalizer exactly, which also keeps large kappa from overflowing.
    uniform * (p.kappa * m).exp()
}

/// Likelihood divided by its maximum: 1 on the consistent side,
/// `e^{kappa m}` on the other.
fn relative_likelihood<T: Scalar>(x: &Vec3<T>, p: &CustomDistParams<T>) -> T {
    let uniform = T::one() / (T::lit(2.0) * T::PI() * p.c1);
    custom_pdf(x, p) / uniform
}

impl<T: Scalar> ParticleSet<T> {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> T {
        self.particles.iter().fold(T::zero(), |a, p| a + p.weight)
    }

    pub fn normalize(&mut self) {
        let s = self.total_weight();
        if s > T::zero() && s.is_finite() {
            for p in &mut self.particles {
                p.weight = p.weight / s;
            }
        } else {
            let u = T::one() / T::lit(self.particles.len().max(1) as f64);
            for p in &mut self.particles {
                p.weight = u;
            }
        }
        self.normalized = true;
    }

    pub fn uniform(positions: Vec<Vec3<T>>, prior: ConstraintSet<T>) -> Self {
        let w = T::one() / T::lit(positions.len().max(1) as f64);
        Self {
            particles: positions.into_iter().map(|position| Particle { position, weight: w }).collect(),
            normalized: true,
            prior,
        }
    }

    /// A filter whose every particle sits at `at` (e.g. a learner that
    /// already knows the answer).
    pub fn point_mass(at: Vec3<T>, n: usize, prior: ConstraintSet<T>) -> Self {
        Self::uniform(vec![at; n.max(1)], prior)
    }

    /// Normalized weight of particles satisfying `pred`.
    pub fn mass_where(&self, pred: impl Fn(&Vec3<T>) -> bool) -> T {
        let total = self.total_weight();
        let hit = self
            .particles
            .iter()
            .filter(|p| pred(&p.position))
            .fold(T::zero(), |a, p| a + p.weight);
        if total > T::zero() {
            hit / total
        } else {
            T::zero()
        }
    }

    pub fn mass_in(&self, region: &ConstraintSet<T>) -> T {
        self.mass_where(|x| region.contains(x))
    }

    /// Weight on the side of `c` it rules out.
    pub fn mass_violating(&self, c: &HalfSpaceConstraint<T>) -> T {
        self.mass_where(|x| !c.contains(x))
    }

    /// Normalized weighted mean of the positions.
    pub fn mean_direction(&self) -> Option<Vec3<T>> {
        self.particles
            .iter()
            .fold(Vec3::zero(), |a, p| a + p.position * p.weight)
            .normalized()
    }
}

/// `N` particles uniform on the prior region, equal weights.
pub fn init_particles<T: Scalar, R: Rng + ?Sized>(
    cfg: &FilterConfig,
    prior: &ConstraintSet<T>,
    rng: &mut R,
) -> Result<ParticleSet<T>> {
    let positions = sample_region_rng(prior, cfg.n, rng).ok_or(Error::EmptyPrior)?;
    Ok(ParticleSet::uniform(positions, prior.clone()))
}

/// Rejection sampling; `None` when the region looks empty.
fn sample_region_rng<T: Scalar, R: Rng + ?Sized>(
    region: &ConstraintSet<T>,
    n: usize,
    rng: &mut R,
) -> Option<Vec<Vec3<T>>> {
    let budget = n.saturating_mul(2000).max(200_000);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        if tries >= budget {
            return None;
        }
        tries += 1;
        let x = sample_uniform(rng);
        if region.contains(&x) {
            out.push(x);
        }
    }
    Some(out)
}

pub fn effective_sample_size<T: Scalar>(ps: &ParticleSet<T>) -> T {
    let s = ps.particles.iter().fold(T::zero(), |a, p| a + p.weight * p.weight);
    if s > T::zero() {
        T::one() / s
    } else {
        T::zero()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Mass kept relative to an all-consistent cloud.
    pub kept_fraction: f64,
    pub reset: bool,
    pub ess: f64,
    pub resampled: bool,
    pub occupied_bins: usize,
    pub particles: usize,
}

/// One observation: reweight, maybe reset, normalize, maybe resample.
/// `None` leaves the set untouched.
pub fn update<T: Scalar, R: Rng + ?Sized>(
    ps: &ParticleSet<T>,
    constraint: Option<&HalfSpaceConstraint<T>>,
    cfg: &FilterConfig,
    rng: &mut R,
) -> (ParticleSet<T>, UpdateReport) {
    let Some(c) = constraint else {
        let ess = effective_sample_size(ps).as_f64();
        return (
            ps.clone(),
            UpdateReport { kept_fraction: 1.0, ess, particles: ps.len(), ..Default::default() },
        );
    };
    let mut next = ps.clone();
    if !next.normalized {
        next.normalize();
    }
    let params = CustomDistParams::new(c.normal(), T::lit(cfg.kappa));
    let before = next.total_weight();
    let mut kept = T::zero();
    for p in &mut next.particles {
        let r = relative_likelihood(&p.position, &params);
        kept = kept + p.weight * r;
        p.weight = p.weight * custom_pdf(&p.position, &params);
    }
    let kept_fraction = if before > T::zero() { (kept / before).as_f64() } else { 0.0 };
    let mut report = UpdateReport { kept_fraction, ..Default::default() };
    if !(kept_fraction >= cfg.reset_threshold) {
        next = reset(&next, &ConstraintSet::from_vec(vec![c.clone()]), cfg, rng);
        report.reset = true;
    }
    next.normalize();
    let ess = effective_sample_size(&next);
    report.ess = ess.as_f64();
    if report.ess < cfg.ess_fraction * next.len() as f64 {
        let (r, bins) = kld_resample_report(&next, cfg, rng);
        next = r;
        report.resampled = true;
        report.occupied_bins = bins;
    }
    report.particles = next.len();
    (next, report)
}

/// Applies several constraints in sequence.
pub fn update_many<'a, T: Scalar, R: Rng + ?Sized>(
    ps: &ParticleSet<T>,
    constraints: impl IntoIterator<Item = &'a HalfSpaceConstraint<T>>,
    cfg: &FilterConfig,
    rng: &mut R,
) -> (ParticleSet<T>, Vec<UpdateReport>) {
    let mut cur = ps.clone();
    let mut reports = Vec::new();
    for c in constraints {
        let (n, r) = update(&cur, Some(c), cfg, rng);
        cur = n;
        reports.push(r);
    }
    (cur, reports)
}

/// Half the particles uniform on the region of `recent`, half on the prior.
/// Falls back to the prior alone when `recent` is empty or infeasible.
pub fn reset<T: Scalar, R: Rng + ?Sized>(
    ps: &ParticleSet<T>,
    recent: &ConstraintSet<T>,
    cfg: &FilterConfig,
    rng: &mut R,
) -> ParticleSet<T> {
    let n = cfg.n.max(1);
    let half = n / 2;
    let mut positions = if recent.is_empty() {
        Vec::new()
    } else {
        sample_region_rng(recent, half, rng).unwrap_or_default()
    };
    let rest = n - positions.len();
    match sample_region_rng(&ps.prior, rest, rng) {
        Some(mut p) => positions.append(&mut p),
        None => positions.extend((0..rest).map(|_| sample_uniform(rng))),
    }
    ParticleSet::uniform(positions, ps.prior.clone())
}

/// Perturbs every particle by a vMF draw centred on it; weights are kept.
pub fn jitter<T: Scalar, R: Rng + ?Sized>(ps: &ParticleSet<T>, kappa: f64, rng: &mut R) -> ParticleSet<T> {
    let mut out = ps.clone();
    for p in &mut out.particles {
        p.position = sample_vmf(rng, &p.position, kappa);
    }
    out
}

/// Minimum sample count for the KLD bound with `k` occupied bins.
pub fn kld_bound(k: usize, epsilon: f64, delta: f64) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - delta);
    let km1 = (k - 1) as f64;
    let a = 2.0 / (9.0 * km1);
    km1 / (2.0 * epsilon) * (1.0 - a + a.sqrt() * z).powi(3)
}

/// Systematic draw of `m` indices proportional to weight.
pub fn systematic_indices<T: Scalar, R: Rng + ?Sized>(ps: &ParticleSet<T>, m: usize, rng: &mut R) -> Vec<usize> {
    let total = ps.total_weight().as_f64();
    let n = ps.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let step = total / m as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(m);
    let mut cum = ps.particles[0].weight.as_f64();
    let mut i = 0;
    for _ in 0..m {
        while u > cum && i + 1 < n {
            i += 1;
            cum += ps.particles[i].weight.as_f64();
        }
        out.push(i);
        u += step;
    }
    out
}

/// KLD-sized resampling with jitter; uniform weights afterwards.
pub fn kld_resample<T: Scalar, R: Rng + ?Sized>(ps: &ParticleSet<T>, cfg: &FilterConfig, rng: &mut R) -> ParticleSet<T> {
    kld_resample_report(ps, cfg, rng).0
}

/// As [`kld_resample`], also returning the number of occupied bins at stop.
pub fn kld_resample_report<T: Scalar, R: Rng + ?Sized>(
    ps: &ParticleSet<T>,
    cfg: &FilterConfig,
    rng: &mut R,
) -> (ParticleSet<T>, usize) {
    let mut pool = systematic_indices(ps, cfg.n_max, rng);
    pool.shuffle(rng);
    let mut bins = HashSet::new();
    let mut chosen = Vec::new();
    for i in pool {
        let x = ps.particles[i].position;
        bins.insert(equal_area_bin(&x, cfg.bin_resolution));
        chosen.push(x);
        let n = chosen.len();
        if n >= cfg.n_min && n as f64 >= kld_bound(bins.len(), cfg.kld_epsilon, cfg.kld_delta) {
            break;
        }
    }
    let positions = chosen
        .into_iter()
        .map(|x| if cfg.jitter_kappa > 0.0 { sample_vmf(rng, &x, cfg.jitter_kappa) } else { x })
        .collect();
    (ParticleSet::uniform(positions, ps.prior.clone()), bins.len())
}

/// `k` well-spread beliefs: systematic resample to a candidate set, start
/// from the heaviest candidate, then repeatedly add the candidate farthest
/// (geodesically) from everything chosen so far.
pub fn sample_beliefs<T: Scalar, R: Rng + ?Sized>(
    ps: &ParticleSet<T>,
    k: usize,
    rng: &mut R,
) -> Vec<RewardWeights<T>> {
    let m = ps.len().min(40 * k.max(1));
    let mut idx = systematic_indices(ps, m, rng);
    idx.sort_unstable();
    idx.dedup();
    let candidates: Vec<Vec3<T>> = idx.iter().map(|&i| ps.particles[i].position).collect();
    let seed = idx
        .iter()
        .enumerate()
        .max_by(|(a, &i), (b, &j)| {
            ps.particles[i]
                .weight
                .partial_cmp(&ps.particles[j].weight)
                .unwrap()
                .then(b.cmp(a))
        })
        .map(|(pos, _)| pos);
    let Some(seed) = seed else { return Vec::new() };
    greedy_k_center(&candidates, k, seed)
        .into_iter()
        .filter_map(|i| RewardWeights::from_proportions(candidates[i]).ok())
        .collect()
}

/// Farthest-point selection of up to `k` indices, starting from `first`.
/// Ties go to the lower index.
pub fn greedy_k_center<T: Scalar>(points: &[Vec3<T>], k: usize, first: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| p.geodesic(&points[first]).as_f64()).collect();
    while chosen.len() < k.min(points.len()) {
        let (next, _) = dist
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        if next == usize::MAX {
            break;
        }
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(p.geodesic(&points[next]).as_f64());
        }
    }
    chosen
}

/// `pf/v1` snapshot of a filter after an event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSnapshot {
    pub schema: String,
    pub event_index: usize,
    pub config: FilterConfig,
    /// `[x, y, z, weight]` per particle.
    pub particles: Vec<[f64; 4]>,
    pub prior: ConstraintSet<f64>,
}

impl FilterSnapshot {
    pub fn capture<T: Scalar>(ps: &ParticleSet<T>, cfg: &FilterConfig, event_index: usize) -> Self {
        Self {
            schema: PF_SCHEMA.into(),
            event_index,
            config: cfg.clone(),
            particles: ps
                .particles
                .iter()
                .map(|p| {
                    let [x, y, z] = p.position.to_f64();
                    [x, y, z, p.weight.as_f64()]
                })
                .collect(),
            prior: ConstraintSet::from_vec(
                ps.prior
                    .iter()
                    .filter_map(|c| HalfSpaceConstraint::new(c.normal().cast::<f64>(), c.provenance))
                    .collect(),
            ),
        }
    }

    pub fn to_particles(&self) -> ParticleSet<f64> {
        ParticleSet {
            particles: self
                .particles
                .iter()
                .map(|[x, y, z, w]| Particle { position: Vec3::new(*x, *y, *z), weight: *w })
                .collect(),
            normalized: true,
            prior: self.prior.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bec::Provenance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn constraint(a: f64, b: f64, c: f64) -> HalfSpaceConstraint<f64> {
        HalfSpaceConstraint::new(Vec3::new(a, b, c), Provenance::Demonstration).unwrap()
    }

    fn action_prior() -> ConstraintSet<f64> {
        ConstraintSet::from_vec(vec![HalfSpaceConstraint::prior(Vec3::new(0.0, 0.0, -1.0))])
    }

    #[test]
    fn pdf_values_for_kappa_two() {
        // Closed forms worked by hand: c1 = 1 + (1 - e^-2)/2.
        let c1 = 1.0 + (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((c1 - 1.432_332_358_4).abs() < 1e-9);
        let p = CustomDistParams::new(Vec3::new(0.0, 0.0, 1.0), 2.0);
        assert!((p.c1 - c1).abs() < 1e-12);
        let up = custom_pdf(&Vec3::new(0.0, 0.6, 0.8), &p);
        assert!((up - 1.0 / (2.0 * std::f64::consts::PI * c1)).abs() < 1e-12);
        assert!((up - 0.111_115).abs() < 1e-5);
        let down = custom_pdf(&Vec3::new(0.0, 0.0, -1.0), &p);
        assert!((down - up * (-2.0f64).exp()).abs() < 1e-12);
        assert!((down - 0.015_04).abs() < 1e-5);
        let edge = custom_pdf(&Vec3::new(1.0, 0.0, 0.0), &p);
        assert_eq!(edge, up);
        let just_below = custom_pdf(&Vec3::new(1.0, 0.0, -1e-13).normalized().unwrap(), &p);
        assert!((just_below - up).abs() < 1e-9);
    }

    #[test]
    fn pdf_survives_huge_kappa() {
        let p = CustomDistParams::new(Vec3::new(0.0, 0.0, 1.0), 800.0);
        let v: f64 = custom_pdf(&Vec3::new(0.0, 0.6, -0.8), &p);
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn ess_examples() {
        let mk = |w: Vec<f64>| ParticleSet {
            particles: w.into_iter().map(|weight| Particle { position: Vec3::new(0.0, 0.0, 1.0), weight }).collect(),
            normalized: true,
            prior: ConstraintSet::new(),
        };
        assert!((effective_sample_size(&mk(vec![0.01; 100])) - 100.0).abs() < 1e-9);
        assert!((effective_sample_size(&mk(vec![0.5, 0.5, 0.0, 0.0])) - 2.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&mk(vec![1.0, 0.0, 0.0])), 1.0);
    }

    #[test]
    fn init_respects_prior_and_symmetry() {
        let cfg = FilterConfig { n: 5000, ..Default::default() };
        let ps = init_particles::<f64, _>(&cfg, &ConstraintSet::new(), &mut rng(1)).unwrap();
        assert_eq!(ps.len(), 5000);
        let mean = ps.particles.iter().fold(Vec3::zero(), |a, p| a + p.position * p.weight);
        assert!(mean.norm() < 0.05);
        let ps = init_particles(&cfg, &action_prior(), &mut rng(2)).unwrap();
        assert!(ps.particles.iter().all(|p| p.position.z < 0.0));
        let one = init_particles::<f64, _>(&FilterConfig { n: 1, n_min: 1, ..Default::default() }, &ConstraintSet::new(), &mut rng(3)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.particles[0].weight, 1.0);
        assert!(one.particles[0].position.is_unit());
    }

    #[test]
    fn contradictory_prior_is_an_error() {
        let c = constraint(0.0, 0.0, 1.0);
        let prior = ConstraintSet::from_vec(vec![c.clone(), c.negated(), constraint(1.0, 0.0, 0.0), constraint(-1.0, 0.0, 0.01)]);
        let cfg = FilterConfig { n: 10, n_min: 1, ..Default::default() };
        assert!(matches!(init_particles::<f64, _>(&cfg, &prior, &mut rng(1)), Err(Error::EmptyPrior)));
    }

    #[test]
    fn consistent_observation_changes_nothing() {
        let cfg = FilterConfig::default();
        let ps = init_particles(&cfg, &action_prior(), &mut rng(4)).unwrap();
        // Everything in the prior has z < 0, so (0, 0, -1) is satisfied.
        let (next, rep) = update(&ps, Some(&constraint(0.0, 0.0, -1.0)), &cfg, &mut rng(5));
        assert!(!rep.reset && !rep.resampled);
        for (a, b) in ps.particles.iter().zip(&next.particles) {
            assert!((a.weight - b.weight).abs() < 1e-15);
        }
        assert!((rep.ess - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn empty_update_is_identity() {
        let cfg = FilterConfig::default();
        let ps = init_particles(&cfg, &action_prior(), &mut rng(4)).unwrap();
        let (next, _) = update(&ps, None, &cfg, &mut rng(5));
        assert_eq!(next, ps);
    }

    #[test]
    fn conflicting_pair_triggers_reset_below_threshold() {
        // For a uniform cloud, after n then -n the kept fraction is
        // 2A / (1 + A) with A = (1 - e^-k) / k.
        for kappa in [2.0, 10.0, 50.0] {
            let a: f64 = (1.0 - (-kappa as f64).exp()) / kappa;
            let expected = 2.0 * a / (1.0 + a);
            let cfg = FilterConfig { n: 20_000, n_max: 20_000, kappa, ess_fraction: 1e-9, ..Default::default() };
            let ps = init_particles::<f64, _>(&cfg, &ConstraintSet::new(), &mut rng(6)).unwrap();
            let c = constraint(0.2, -0.5, 0.7);
            let (ps1, r1) = update(&ps, Some(&c), &cfg, &mut rng(7));
            assert!(!r1.reset);
            let (ps2, r2) = update(&ps1, Some(&c.negated()), &cfg, &mut rng(8));
            assert!((r2.kept_fraction - expected).abs() < 0.02, "kappa {kappa}: {} vs {expected}", r2.kept_fraction);
            assert_eq!(r2.reset, expected < cfg.reset_threshold, "kappa {kappa}");
            if r2.reset {
                let latest = ps2.mass_where(|x| c.negated().contains(x));
                assert!(latest >= 0.5);
            }
        }
    }

    #[test]
    fn reset_with_one_constraint_places_half_inside() {
        let cfg = FilterConfig { n: 1000, ..Default::default() };
        let ps = init_particles::<f64, _>(&cfg, &ConstraintSet::new(), &mut rng(9)).unwrap();
        let c = constraint(1.0, 1.0, 0.0);
        let r = reset(&ps, &ConstraintSet::from_vec(vec![c.clone()]), &cfg, &mut rng(10));
        assert_eq!(r.len(), 1000);
        assert!(r.particles[..500].iter().all(|p| c.contains(&p.position)));
        let fallback = reset(&ps, &ConstraintSet::new(), &cfg, &mut rng(11));
        assert_eq!(fallback.len(), 1000);
    }

    #[test]
    fn kld_single_bin_clamps_to_minimum() {
        let cfg = FilterConfig { n_min: 100, n: 500, ..Default::default() };
        let ps = ParticleSet::point_mass(Vec3::new(0.0, 0.0, 1.0), 500, ConstraintSet::new());
        let (r, bins) = kld_resample_report(&ps, &cfg, &mut rng(12));
        assert_eq!(bins, 1);
        assert_eq!(r.len(), 100);
        assert!(r.particles.iter().all(|p| p.position.is_unit()));
    }

    #[test]
    fn kld_bound_for_hundred_bins() {
        let z = 2.326_347_874_040_841;
        let k: f64 = 99.0;
        let a = 2.0 / (9.0 * k);
        let expect = k / 0.1 * (1.0 - a + a.sqrt() * z).powi(3);
        assert!((kld_bound(100, 0.05, 0.01) - expect).abs() < 1e-9);
        assert!((expect - 1346.5).abs() < 1.0);
    }

    #[test]
    fn greedy_picks_one_per_antipodal_cluster() {
        let mut r = rng(13);
        let north = Vec3::new(0.0, 0.0, 1.0);
        let mut pts: Vec<Vec3<f64>> = (0..10).map(|_| sample_vmf(&mut r, &north, 200.0)).collect();
        pts.extend((0..10).map(|_| sample_vmf(&mut r, &-north, 200.0)));
        let sel = greedy_k_center(&pts, 2, 3);
        assert_eq!(sel.len(), 2);
        assert!(pts[sel[0]].z * pts[sel[1]].z < 0.0);
        assert_eq!(greedy_k_center(&pts, 50, 0).len(), 20);
    }

    #[test]
    fn sample_beliefs_seed_is_heaviest() {
        let mut ps = ParticleSet::point_mass(Vec3::new(0.0, 0.0, -1.0), 3, ConstraintSet::new());
        ps.particles[1] = Particle { position: Vec3::new(0.0, 1.0, 0.0), weight: 0.5 };
        ps.particles[0].weight = 0.25;
        ps.particles[2] = Particle { position: Vec3::new(1.0, 0.0, 0.0), weight: 0.25 };
        let one = sample_beliefs(&ps, 1, &mut rng(14));
        assert_eq!(one[0].vector(), Vec3::new(0.0, 1.0, 0.0));
        let all = sample_beliefs(&ps, 3, &mut rng(14));
        assert_eq!(all.len(), 3);
        assert_eq!(sample_beliefs(&ps, 10, &mut rng(14)).len(), 3);
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = FilterConfig { n: 10, n_min: 1, ..Default::default() };
        let ps = init_particles(&cfg, &action_prior(), &mut rng(15)).unwrap();
        let snap = FilterSnapshot::capture(&ps, &cfg, 3);
        let text = serde_json::to_string(&snap).unwrap();
        let back: FilterSnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.to_particles(), ps);
    }
}

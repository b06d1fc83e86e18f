//! Half-space constraints on reward weights.
//!
//! A demonstration `xi*` compared against an alternative trajectory yields
//! the half-space `w . (mu* - mu_alt) >= 0`; normalized, that is one
//! knowledge component (KC). This module builds those constraints from
//! demonstrations, counterfactual beliefs and graded test responses, reduces
//! sets of them to a minimal description, estimates the spherical area they
//! leave feasible and groups the survivors into lessons.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    feature_counts, rollout, solve, solve_from, FeatureVector, GridEnvironment, MDPSpec, Policy,
    RewardWeights, State, Trajectory, FEATURE_DIM,
};
use crate::scalar::Scalar;
use crate::sphere::{sample_uniform, Vec3};

pub const KC_SCHEMA: &str = "kc/v1";

/// Normals closer than this (radians) are the same constraint.
pub const DEDUP_ANGLE: f64 = 1e-6;
/// Sphere samples used to decide redundancy.
pub const REDUNDANCY_SAMPLES: usize = 100_000;
pub const REDUNDANCY_SEED: u64 = 0x6265_635f_7265_64;
pub const AREA_SAMPLES: usize = 1_000_000;
pub const AREA_SEED: u64 = 0x6265_635f_6172_6561;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Demonstration,
    TestResponse,
    Prior,
    Policy,
}

/// `w . normal >= 0`, with `normal` a unit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct HalfSpaceConstraint<T> {
    normal: Vec3<T>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

impl<T: Scalar> HalfSpaceConstraint<T> {
    /// Normalizes `direction`; `None` when it is (numerically) zero.
    pub fn new(direction: Vec3<T>, provenance: Provenance) -> Option<Self> {
        direction
            .normalized()
            .map(|normal| Self { normal, provenance, sources: Vec::new() })
    }

    pub fn prior(direction: Vec3<T>) -> Self {
        Self::new(direction, Provenance::Prior).expect("nonzero prior normal")
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.sources.push(source.into());
        self
    }

    pub fn normal(&self) -> Vec3<T> {
        self.normal
    }

    /// Signed margin `x . n`.
    pub fn margin(&self, x: &Vec3<T>) -> T {
        self.normal.dot(x)
    }

    pub fn contains(&self, x: &Vec3<T>) -> bool {
        self.margin(x) >= T::zero()
    }

    /// Same as `contains` but with the numeric tolerance on the boundary.
    pub fn satisfied_by(&self, x: &Vec3<T>) -> bool {
        self.margin(x) >= -T::tol()
    }

    pub fn negated(&self) -> Self {
        Self { normal: -self.normal, ..self.clone() }
    }

    pub fn same_as(&self, o: &Self) -> bool {
        self.normal.angle(&o.normal).as_f64() <= DEDUP_ANGLE
    }

    /// Feature indices with a nonzero normal component.
    pub fn feature_support(&self) -> Vec<usize> {
        (0..FEATURE_DIM)
            .filter(|&k| self.normal.get(k).abs() > T::tol())
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ConstraintSet<T> {
    pub constraints: Vec<HalfSpaceConstraint<T>>,
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn new() -> Self {
        Self { constraints: Vec::new() }
    }

    pub fn from_vec(constraints: Vec<HalfSpaceConstraint<T>>) -> Self {
        Self { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, HalfSpaceConstraint<T>> {
        self.constraints.iter()
    }

    pub fn contains(&self, x: &Vec3<T>) -> bool {
        self.constraints.iter().all(|c| c.contains(x))
    }

    /// Adds `c` unless an equivalent normal is present.
    pub fn insert(&mut self, c: HalfSpaceConstraint<T>) -> bool {
        if let Some(existing) = self.constraints.iter_mut().find(|k| k.same_as(&c)) {
            for s in c.sources {
                if !existing.sources.contains(&s) {
                    existing.sources.push(s);
                }
            }
            false
        } else {
            self.constraints.push(c);
            true
        }
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = HalfSpaceConstraint<T>>) {
        for c in other {
            self.insert(c);
        }
    }

    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.extend(other.constraints.iter().cloned());
        out
    }

    /// Unit vector through the middle of the region the normals point into,
    /// or `None` for an empty set or cancelling normals.
    pub fn center(&self) -> Option<Vec3<T>> {
        self.constraints
            .iter()
            .fold(Vec3::zero(), |acc, c| acc + c.normal)
            .normalized()
    }
}

impl<T> IntoIterator for ConstraintSet<T> {
    type Item = HalfSpaceConstraint<T>;
    type IntoIter = std::vec::IntoIter<HalfSpaceConstraint<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.constraints.into_iter()
    }
}

/// `normalize(mu_star - mu_alt)`, or `None` when the two coincide.
pub fn constraint_from_pair<T: Scalar>(
    mu_star: &FeatureVector<T>,
    mu_alt: &FeatureVector<T>,
    provenance: Provenance,
) -> Option<HalfSpaceConstraint<T>> {
    HalfSpaceConstraint::new(mu_star.0 - mu_alt.0, provenance)
}

/// Slice form of [`constraint_from_pair`] that checks dimensions.
pub fn constraint_from_slices<T: Scalar>(
    mu_star: &[T],
    mu_alt: &[T],
    provenance: Provenance,
) -> Result<Option<HalfSpaceConstraint<T>>> {
    if mu_star.len() != mu_alt.len() {
        return Err(Error::DimensionMismatch(mu_star.len(), mu_alt.len()));
    }
    let a = FeatureVector::from_slice(mu_star)?;
    let b = FeatureVector::from_slice(mu_alt)?;
    Ok(constraint_from_pair(&a, &b, provenance))
}

/// Constraints a learner holding any of `beliefs` would extract from `demo`:
/// each belief's own optimal trajectory from the demo start is the
/// counterfactual. No check that `demo` is optimal.
pub fn counterfactual_constraints<T: Scalar>(
    env: &Arc<GridEnvironment>,
    gamma: T,
    horizon: usize,
    demo: &Trajectory,
    beliefs: &[RewardWeights<T>],
) -> Result<ConstraintSet<T>> {
    let mu_demo = feature_counts(env, demo, gamma)?;
    let mut out = ConstraintSet::new();
    for b in beliefs {
        let spec = MDPSpec { env: env.clone(), weights: *b, gamma, horizon };
        let policy = solve_from(&spec, &demo.start)?;
        let cf = rollout(&policy, env, &demo.start)?;
        let mu_cf = feature_counts(env, &cf, gamma)?;
        if let Some(c) = constraint_from_pair(&mu_demo, &mu_cf, Provenance::Demonstration) {
            out.insert(c.with_source(env.id()));
        }
    }
    Ok(out)
}

/// Checks that `demo` is optimal under `spec.weights`, then generates its
/// counterfactual constraints against `beliefs`.
pub fn demo_constraints<T: Scalar>(
    spec: &MDPSpec<T>,
    demo: &Trajectory,
    beliefs: &[RewardWeights<T>],
) -> Result<ConstraintSet<T>> {
    let policy = solve_from(spec, &demo.start)?;
    let got = spec.weights.vector().dot(&feature_counts(&spec.env, demo, spec.gamma)?.0);
    if got < policy.start_value() - T::lit(1e-9).max(T::tol()) || !spec.env.is_goal(&demo.end()) {
        return Err(Error::InvalidDemonstration(spec.env.id().to_string()));
    }
    counterfactual_constraints(&spec.env, spec.gamma, spec.horizon, demo, beliefs)
}

/// The constraint a wrong test answer violates, or `None` when the response
/// earns the optimal reward (any reward-optimal answer is correct).
pub fn test_response_constraint<T: Scalar>(
    spec: &MDPSpec<T>,
    correct: &Trajectory,
    response: &Trajectory,
) -> Result<Option<HalfSpaceConstraint<T>>> {
    if response.start != correct.start {
        return Err(Error::InvalidTrajectory("response does not begin at the test start".into()));
    }
    if !spec.env.is_goal(&response.end()) {
        return Err(Error::InvalidTrajectory("response does not reach the goal".into()));
    }
    let mu_c = feature_counts(&spec.env, correct, spec.gamma)?;
    let mu_r = feature_counts(&spec.env, response, spec.gamma)?;
    let w = spec.weights.vector();
    if (w.dot(&mu_c.0) - w.dot(&mu_r.0)).abs() <= T::lit(1e-9).max(T::tol()) {
        return Ok(None);
    }
    Ok(constraint_from_pair(&mu_c, &mu_r, Provenance::TestResponse).map(|c| c.with_source(spec.env.id())))
}

/// Optimal behaviour from `start` against every one-step deviation followed
/// by optimal behaviour, as strict constraints (ties dropped).
pub fn deviation_constraints<T: Scalar>(
    spec: &MDPSpec<T>,
    policy: &Policy<T>,
    start: &State,
    out: &mut ConstraintSet<T>,
) -> Result<()> {
    let env = &spec.env;
    if env.is_goal(start) {
        return Ok(());
    }
    let h = spec.horizon;
    let Some(best) = policy.action(start, h) else { return Ok(()) };
    let opt = rollout(policy, env, start)?;
    let mu_opt = feature_counts(env, &opt, spec.gamma)?;
    let w = spec.weights.vector();
    for (a, q) in policy.q_values(start, h, &spec.weights, spec.gamma) {
        if a == best || q == T::neg_infinity() {
            continue;
        }
        let (next, phi) = env.step(start, a).expect("q_values lists legal actions");
        let tail = rollout_steps(policy, env, &next, h - 1, spec.gamma)?;
        let mu_alt = FeatureVector(Vec3::from_f64(phi) + tail.0 * spec.gamma);
        let diff = mu_opt.0 - mu_alt.0;
        if w.dot(&diff) <= T::lit(1e-9).max(T::tol()) {
            continue;
        }
        if let Some(c) = HalfSpaceConstraint::new(diff, Provenance::Policy) {
            out.insert(c.with_source(env.id()));
        }
    }
    Ok(())
}

fn rollout_steps<T: Scalar>(
    policy: &Policy<T>,
    env: &GridEnvironment,
    start: &State,
    mut left: usize,
    gamma: T,
) -> Result<FeatureVector<T>> {
    let mut s = *start;
    let mut steps = Vec::new();
    while !env.is_goal(&s) {
        let a = policy
            .action(&s, left)
            .ok_or_else(|| Error::UnsolvableEnvironment(env.id().to_string()))?;
        let (n, _) = env.step(&s, a).expect("legal");
        steps.push(crate::mdp::Step { state: s, action: a, next: n });
        s = n;
        left -= 1;
    }
    feature_counts(env, &Trajectory { start: *start, steps }, gamma)
}

/// Constraints that a test in `spec` can reveal: the optimal answer against
/// one-step deviations at every state along it.
pub fn revealable_constraints<T: Scalar>(spec: &MDPSpec<T>) -> Result<ConstraintSet<T>> {
    let policy = solve(spec)?;
    revealable_from(spec, &policy, &spec.env.start_state())
}

/// As [`revealable_constraints`], for an answer beginning at `start`
/// (a state reachable from the environment start).
pub fn revealable_from<T: Scalar>(spec: &MDPSpec<T>, policy: &Policy<T>, start: &State) -> Result<ConstraintSet<T>> {
    let opt = rollout(policy, &spec.env, start)?;
    let mut out = ConstraintSet::new();
    for s in std::iter::once(*start).chain(opt.steps.iter().map(|st| st.next)) {
        deviation_constraints(spec, policy, &s, &mut out)?;
    }
    Ok(out)
}

/// BEC of the policy shared by a pool of environments, reduced to a minimal
/// set within `prior`.
pub fn policy_bec<T: Scalar>(pool: &[MDPSpec<T>], prior: &ConstraintSet<T>) -> Result<ConstraintSet<T>> {
    let first = pool.first().ok_or(Error::EmptyPool)?;
    for spec in pool {
        if spec.weights != first.weights || spec.gamma != first.gamma {
            return Err(Error::InvalidConfig(vec![format!(
                "pool member {} uses different weights or discount",
                spec.env.id()
            )]));
        }
    }
    let mut all = ConstraintSet::new();
    for spec in pool {
        let policy = solve(spec)?;
        for s in policy.graph().states().to_vec() {
            deviation_constraints(spec, &policy, &s, &mut all)?;
        }
    }
    Ok(remove_redundant_in(&all, prior))
}

/// Seeded uniform draws on the part of the sphere satisfying `region`.
pub fn sample_region<T: Scalar>(region: &ConstraintSet<T>, n: usize, seed: u64) -> Vec<Vec3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n && tries < n.saturating_mul(1000).max(1_000_000) {
        tries += 1;
        let x = sample_uniform::<T, _>(&mut rng);
        if region.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Minimal subset over the whole sphere.
pub fn remove_redundant<T: Scalar>(cs: &ConstraintSet<T>) -> ConstraintSet<T> {
    remove_redundant_in(cs, &ConstraintSet::new())
}

/// Drops constraints implied (on the part of the sphere inside `prior`) by
/// the ones kept. Decided on a fixed seeded sample of the prior region: a
/// constraint stays only if some sample violates it and nothing else kept.
pub fn remove_redundant_in<T: Scalar>(cs: &ConstraintSet<T>, prior: &ConstraintSet<T>) -> ConstraintSet<T> {
    let mut uniq = ConstraintSet::new();
    uniq.extend(cs.constraints.iter().cloned());
    if uniq.len() <= 1 {
        return uniq;
    }
    let samples = sample_region(prior, REDUNDANCY_SAMPLES, REDUNDANCY_SEED);
    let violates: Vec<Vec<bool>> = uniq
        .constraints
        .iter()
        .map(|c| samples.iter().map(|x| !c.contains(x)).collect())
        .collect();
    let mut count = vec![0u32; samples.len()];
    for row in &violates {
        for (j, v) in row.iter().enumerate() {
            count[j] += *v as u32;
        }
    }
    let mut keep = vec![true; uniq.len()];
    for (i, row) in violates.iter().enumerate() {
        let needed = row.iter().zip(&count).any(|(v, c)| *v && *c == 1);
        if !needed {
            keep[i] = false;
            for (j, v) in row.iter().enumerate() {
                count[j] -= *v as u32;
            }
        }
    }
    ConstraintSet::from_vec(
        uniq.constraints
            .into_iter()
            .zip(keep)
            .filter_map(|(c, k)| k.then_some(c))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub fraction: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo fraction of the sphere satisfying every constraint.
pub fn bec_area<T: Scalar>(cs: &ConstraintSet<T>) -> AreaEstimate {
    bec_area_with(cs, AREA_SAMPLES, AREA_SEED)
}

pub fn bec_area_with<T: Scalar>(cs: &ConstraintSet<T>, samples: usize, seed: u64) -> AreaEstimate {
    if cs.is_empty() {
        return AreaEstimate { fraction: 1.0, std_error: 0.0, samples };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..samples)
        .filter(|_| cs.contains(&sample_uniform::<T, _>(&mut rng)))
        .count();
    let p = hits as f64 / samples as f64;
    AreaEstimate {
        fraction: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        samples,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct KnowledgeComponent<T> {
    pub id: String,
    pub constraint: HalfSpaceConstraint<T>,
    pub feature_support: Vec<usize>,
}

impl<T: Scalar> KnowledgeComponent<T> {
    pub fn new(id: impl Into<String>, constraint: HalfSpaceConstraint<T>) -> Self {
        let feature_support = constraint.feature_support();
        Self { id: id.into(), constraint, feature_support }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Lesson<T> {
    pub label: String,
    pub kcs: Vec<KnowledgeComponent<T>>,
}

/// Which scaffolding stage a constraint belongs to: 0 for the first
/// feature against action cost, 1 for the second, 2 for everything else.
pub fn scaffold_stage<T: Scalar>(c: &HalfSpaceConstraint<T>) -> usize {
    let sup = c.feature_support();
    if sup.iter().all(|k| *k == 0 || *k == 2) {
        0
    } else if sup.iter().all(|k| *k == 1 || *k == 2) {
        1
    } else {
        2
    }
}

/// Groups a minimal constraint set into lessons of increasing feature scope.
/// Within a lesson, constraints closest in direction to the prior come first.
pub fn scaffold_kcs<T: Scalar>(
    cs: &ConstraintSet<T>,
    prior: &ConstraintSet<T>,
    feature_names: [&str; FEATURE_DIM],
) -> Vec<Lesson<T>> {
    let center = prior.center();
    let mut stages: [Vec<HalfSpaceConstraint<T>>; 3] = Default::default();
    for c in cs.iter() {
        stages[scaffold_stage(c)].push(c.clone());
    }
    let labels = [
        format!("{} vs {}", feature_names[0], feature_names[2]),
        format!("{} vs {}", feature_names[1], feature_names[2]),
        "tradeoffs between all features".to_string(),
    ];
    let mut lessons = Vec::new();
    let mut n = 0;
    for (stage, mut group) in stages.into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if let Some(center) = center {
            group.sort_by(|a, b| {
                let da = a.normal().angle(&center).as_f64();
                let db = b.normal().angle(&center).as_f64();
                da.total_cmp(&db)
                    .then_with(|| a.normal().to_f64().partial_cmp(&b.normal().to_f64()).unwrap())
            });
        }
        let kcs = group
            .into_iter()
            .map(|c| {
                n += 1;
                KnowledgeComponent::new(format!("kc{n}"), c)
            })
            .collect();
        lessons.push(Lesson { label: labels[stage].clone(), kcs });
    }
    lessons
}

/// `kc/v1` document: the KC bank grouped into lessons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KcBank {
    pub schema: String,
    pub domain: String,
    pub feature_names: Vec<String>,
    pub weights: [f64; 3],
    pub prior: ConstraintSet<f64>,
    pub lessons: Vec<Lesson<f64>>,
}

impl KcBank {
    pub fn new(
        domain: &str,
        feature_names: [&str; FEATURE_DIM],
        weights: &RewardWeights<f64>,
        prior: ConstraintSet<f64>,
        lessons: Vec<Lesson<f64>>,
    ) -> Self {
        Self {
            schema: KC_SCHEMA.into(),
            domain: domain.into(),
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            weights: weights.vector().to_f64(),
            prior,
            lessons,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: KcBank = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "kc bank".into(),
            message: e.to_string(),
        })?;
        if bank.schema != KC_SCHEMA {
            return Err(Error::Parse {
                path: "kc bank".into(),
                message: format!("unsupported schema {:?}", bank.schema),
            });
        }
        Ok(bank)
    }

    pub fn all_kcs(&self) -> impl Iterator<Item = &KnowledgeComponent<f64>> {
        self.lessons.iter().flat_map(|l| l.kcs.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Action, CellAttr, Coord, DomainTag};

    fn v(a: f64, b: f64, c: f64) -> Vec3<f64> {
        Vec3::new(a, b, c)
    }

    fn c(a: f64, b: f64, cc: f64) -> HalfSpaceConstraint<f64> {
        HalfSpaceConstraint::new(v(a, b, cc), Provenance::Demonstration).unwrap()
    }

    fn fv(a: f64, b: f64, cc: f64) -> FeatureVector<f64> {
        FeatureVector::from_f64([a, b, cc])
    }

    #[test]
    fn detour_versus_mud_bounds_mud_from_below() {
        let k = constraint_from_pair(&fv(0.0, 0.0, 7.0), &fv(1.0, 0.0, 5.0), Provenance::Demonstration).unwrap();
        let expect = v(-1.0, 0.0, 2.0).normalized().unwrap();
        assert!(k.normal().angle(&expect) < 1e-12);
    }

    #[test]
    fn identical_counts_give_nothing() {
        assert!(constraint_from_pair(&fv(1.0, 0.0, 5.0), &fv(1.0, 0.0, 5.0), Provenance::Demonstration).is_none());
    }

    #[test]
    fn slices_of_wrong_length_are_rejected() {
        let r = constraint_from_slices(&[1.0, 2.0], &[1.0, 2.0, 3.0], Provenance::Demonstration);
        assert!(matches!(r, Err(Error::DimensionMismatch(2, 3))));
    }

    #[test]
    fn duplicate_normals_collapse() {
        let cs = ConstraintSet::from_vec(vec![c(1.0, 0.0, 0.0), c(2.0, 0.0, 0.0)]);
        assert_eq!(remove_redundant(&cs).len(), 1);
    }

    #[test]
    fn orthogonal_pair_is_kept() {
        let cs = ConstraintSet::from_vec(vec![c(1.0, 0.0, 0.0), c(0.0, 1.0, 0.0)]);
        assert_eq!(remove_redundant(&cs).len(), 2);
    }

    #[test]
    fn looser_mud_bound_is_implied_under_action_prior() {
        let prior = ConstraintSet::from_vec(vec![HalfSpaceConstraint::prior(v(0.0, 0.0, -1.0))]);
        let tight = c(-1.0, 0.0, 2.0);
        let loose = c(-1.0, 0.0, 1.0);
        for order in [vec![tight.clone(), loose.clone()], vec![loose.clone(), tight.clone()]] {
            let kept = remove_redundant_in(&ConstraintSet::from_vec(order), &prior);
            assert_eq!(kept.len(), 1);
            assert!(kept.constraints[0].same_as(&tight));
        }
        // Without the prior both matter.
        let kept = remove_redundant(&ConstraintSet::from_vec(vec![tight, loose]));
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn area_of_simple_regions() {
        assert_eq!(bec_area(&ConstraintSet::<f64>::new()).fraction, 1.0);
        let half = bec_area(&ConstraintSet::from_vec(vec![c(0.3, -0.2, 0.9)]));
        assert!((half.fraction - 0.5).abs() < 0.002);
        let quarter = bec_area(&ConstraintSet::from_vec(vec![c(1.0, 0.0, 0.0), c(0.0, 1.0, 0.0)]));
        assert!((quarter.fraction - 0.25).abs() < 0.002);
        assert!(quarter.std_error < 0.001);
    }

    #[test]
    fn scaffold_orders_by_feature_scope() {
        let prior = ConstraintSet::from_vec(vec![HalfSpaceConstraint::prior(v(0.0, 0.0, -1.0))]);
        let cs = ConstraintSet::from_vec(vec![
            c(-1.0, -1.0, -2.0),
            c(0.0, 1.0, 2.0),
            c(1.0, 0.0, -4.0),
            c(-1.0, 0.0, 2.0),
        ]);
        let lessons = scaffold_kcs(&cs, &prior, DomainTag::Delivery.feature_names());
        let labels: Vec<_> = lessons.iter().map(|l| l.label.as_str()).collect();
        assert_eq!(
            labels,
            ["traversed mud vs action taken", "battery recharged vs action taken", "tradeoffs between all features"]
        );
        assert_eq!(lessons[0].kcs.len(), 2);
        // (1,0,-4) sits closer to the (0,0,-1) prior direction than (-1,0,2).
        assert!(lessons[0].kcs[0].constraint.same_as(&c(1.0, 0.0, -4.0)));

        let single = scaffold_kcs(&ConstraintSet::from_vec(vec![c(1.0, 0.0, -4.0)]), &prior, DomainTag::Delivery.feature_names());
        assert_eq!(single.len(), 1);
        let three = scaffold_kcs(
            &ConstraintSet::from_vec(vec![c(1.0, 1.0, -4.0), c(-1.0, -1.0, -2.0)]),
            &prior,
            DomainTag::Delivery.feature_names(),
        );
        assert_eq!(three.len(), 1);
        assert_eq!(three[0].label, "tradeoffs between all features");
    }

    fn delivery_w() -> RewardWeights<f64> {
        RewardWeights::from_proportions(v(-3.0, 3.5, -1.0)).unwrap()
    }

    /// 5x3 grid: straight route along row 1 crosses one mud cell, detour
    /// through row 0 costs two extra actions.
    fn mud_detour_env() -> Arc<GridEnvironment> {
        Arc::new(
            GridEnvironment::new(
                "mud-detour",
                DomainTag::Delivery,
                5,
                3,
                Coord(0, 1),
                false,
                Coord(4, 1),
                [
                    (Coord(2, 1), CellAttr::Mud),
                    (Coord(1, 2), CellAttr::Wall),
                    (Coord(2, 2), CellAttr::Wall),
                    (Coord(3, 2), CellAttr::Wall),
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn mud_neutral_belief_yields_the_lower_bound() {
        let spec = MDPSpec::new(mud_detour_env(), delivery_w());
        let demo = crate::mdp::optimal_trajectory(&spec, &spec.env.start_state()).unwrap();
        assert_eq!(demo.len(), 6);
        let neutral = RewardWeights::from_proportions(v(0.0, 0.3, -1.0)).unwrap();
        let cs = demo_constraints(&spec, &demo, &[neutral, neutral, spec.weights]).unwrap();
        assert_eq!(cs.len(), 1, "agreeing belief adds nothing, duplicates collapse");
        assert!(cs.constraints[0].same_as(&c(-1.0, 0.0, 2.0)));
    }

    #[test]
    fn non_optimal_demo_is_rejected() {
        let spec = MDPSpec::new(mud_detour_env(), delivery_w());
        let s = spec.env.start_state();
        use Action::*;
        let through = Trajectory::from_actions(&spec.env, s, &[Right, Right, Right, Right]).unwrap();
        assert!(matches!(demo_constraints(&spec, &through, &[spec.weights]), Err(Error::InvalidDemonstration(_))));
    }

    #[test]
    fn grading_by_reward() {
        let spec = MDPSpec::new(mud_detour_env(), delivery_w());
        let s = spec.env.start_state();
        let correct = crate::mdp::optimal_trajectory(&spec, &s).unwrap();
        assert!(test_response_constraint(&spec, &correct, &correct).unwrap().is_none());
        use Action::*;
        let through = Trajectory::from_actions(&spec.env, s, &[Right, Right, Right, Right]).unwrap();
        let k = test_response_constraint(&spec, &correct, &through).unwrap().unwrap();
        assert!(k.same_as(&c(-1.0, 0.0, 2.0)));
        // Mirror-image detour through row 0 in a different order: same reward.
        let alt = Trajectory::from_actions(&spec.env, s, &[Up, Right, Right, Right, Right, Down]).unwrap();
        assert!(test_response_constraint(&spec, &correct, &alt).unwrap().is_none());
        let short = Trajectory::from_actions(&spec.env, s, &[Right]).unwrap();
        assert!(test_response_constraint(&spec, &correct, &short).is_err());
    }

    #[test]
    fn kc_bank_round_trips() {
        let prior = ConstraintSet::from_vec(vec![HalfSpaceConstraint::prior(v(0.0, 0.0, -1.0))]);
        let lessons = scaffold_kcs(&ConstraintSet::from_vec(vec![c(-1.0, 0.0, 2.0)]), &prior, DomainTag::Delivery.feature_names());
        let bank = KcBank::new("delivery", DomainTag::Delivery.feature_names(), &delivery_w(), prior, lessons);
        let text = serde_json::to_string_pretty(&bank).unwrap();
        assert_eq!(KcBank::from_json(&text).unwrap(), bank);
        assert!(KcBank::from_json(&text.replace("kc/v1", "kc/v2")).is_err());
    }
}

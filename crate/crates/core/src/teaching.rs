//! The closed teaching loop.
//!
//! A [`TeachingState`] walks the KC bank lesson by lesson. Within a lesson it
//! demonstrates each KC (choosing environments that add one new constraint
//! to the learner model at a time), then tests, grades and gives feedback.
//! In `full` mode each missed KC gets a remedial demonstration and a
//! remedial test; a second failure flips switch S and the loop continues
//! with tests and feedback only until the learner answers correctly.
//!
//! [`step`] is a pure function of the curriculum, the previous state and the
//! incoming acknowledgement or response, with randomness drawn from a
//! stream keyed by the configured seed and the step counter, so a session
//! log replays to the identical state.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bec::{
    bec_area_with, counterfactual_constraints, revealable_constraints, revealable_from, sample_region, test_response_constraint, ConstraintSet,
    KcBank, KnowledgeComponent,
};
use crate::beliefs::{init_particles, sample_beliefs, update, FilterConfig};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::mdp::{
    feature_counts, optimal_trajectory, solve, trajectory_reward, CellAttr, GridEnvironment, MDPSpec, RewardWeights, State,
    Trajectory,
};
use crate::{Constraint, Constraints, Kc, Lesson, Particles, Spec, Weights};

pub const SESSION_SCHEMA: &str = "session/v1";

const PRIOR_SPREAD: usize = 400;
const PRIOR_SPREAD_SEED: u64 = 0x5eed;
const MIN_REVEALING_ENVS: usize = 3;
/// Closeness slack within which remedial candidates count as on target.
pub const NEAR_TOLERANCE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Open,
    Partial,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Open, Mode::Partial, Mode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Open => "open",
            Mode::Partial => "partial",
            Mode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Demonstrating,
    Diagnostic,
    RemedialDemo,
    RemedialTest,
    TestsOnly,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Demonstration,
    DiagnosticTest,
    Feedback,
    RemedialDemonstration,
    RemedialTest,
    LikertPrompt,
}

impl EventKind {
    pub fn is_demo(self) -> bool {
        matches!(self, EventKind::Demonstration | EventKind::RemedialDemonstration)
    }

    pub fn is_test(self) -> bool {
        matches!(self, EventKind::DiagnosticTest | EventKind::RemedialTest)
    }
}

/// One entry of the session history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub index: usize,
    pub kind: EventKind,
    pub env_id: String,
    pub start: State,
    /// The demonstration, or the correct answer shown as feedback. Never
    /// set on test events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    /// The learner's answer (tests once graded, and feedback).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Trajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub kc_ids: Vec<String>,
    /// Constraint normals this event fed into the teacher's learner model.
    #[serde(default)]
    pub constraints: Vec<[f64; 3]>,
}

/// A test as the controller sees it; `correct` must not reach the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub kind: EventKind,
    pub env: Arc<GridEnvironment>,
    pub start: State,
    pub correct: Trajectory,
    pub target_kc: Kc,
    /// Every KC of the lesson this test checks.
    pub covers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missed_kc: Option<Kc>,
    /// Reward of the correct answer minus that of the response under w*.
    pub regret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<InteractionEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeachingConfig {
    pub mode: Mode,
    /// Demonstrations plus tests; `None` takes the domain's budget.
    pub budget: Option<usize>,
    /// Keep cycling through the bank until the budget is spent.
    pub review: bool,
    /// Beliefs sampled from the learner model to build counterfactuals.
    pub belief_samples: usize,
    /// Weight of dissimilarity to shown demonstrations when picking tests.
    pub alpha: f64,
    /// Weight of visual complexity when picking tests.
    pub beta: f64,
    /// Weight of visual complexity for remedial selection.
    pub lambda: f64,
    /// Posterior mass on the wrong side above which a constraint is new.
    pub implied_mass: f64,
    /// Failed rounds on a KC before switch S flips.
    pub switch_after: usize,
    pub max_remedial_rounds: usize,
    /// Feed the target KC to the model when a test is answered correctly.
    pub update_on_correct: bool,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for TeachingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            budget: None,
            review: true,
            belief_samples: 8,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            implied_mass: 0.05,
            switch_after: 2,
            max_remedial_rounds: 10,
            update_on_correct: true,
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

impl TeachingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.belief_samples == 0 {
            errs.push("belief_samples must be positive".to_string());
        }
        if self.budget == Some(0) {
            errs.push("budget must be positive".to_string());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be a nonnegative number"));
            }
        }
        if !(0.0..1.0).contains(&self.implied_mass) {
            errs.push("implied_mass must lie in [0, 1)".to_string());
        }
        if self.switch_after == 0 {
            errs.push("switch_after must be positive".to_string());
        }
        if self.max_remedial_rounds < self.switch_after {
            errs.push("max_remedial_rounds must be at least switch_after".to_string());
        }
        if let Err(Error::InvalidConfig(mut e)) = self.filter.validate() {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// A teaching-pool environment with everything selection needs precomputed.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub spec: Spec,
    pub demo: Trajectory,
    /// One-step-deviation constraints along the optimal path from the start.
    pub revealable: Constraints,
    /// Constraints the demonstration conveys to some learner whose beliefs
    /// lie in the prior (counterfactuals against a dense spread of them).
    pub conveyable: Constraints,
    /// Feature-bearing cells relative to the busiest pool environment.
    pub complexity: f64,
    layout: BTreeSet<(i32, i32, u8)>,
}

impl Candidate {
    pub fn id(&self) -> &str {
        self.spec.env.id()
    }

    /// Whether a test here can expose a learner who lacks `kc`, or a
    /// demonstration here can teach it.
    pub fn reveals(&self, kc: &Constraint) -> bool {
        self.revealable.iter().chain(self.conveyable.iter()).any(|c| c.same_as(kc))
    }

    /// `1 - angle / pi` of the revealable constraint nearest `target`.
    pub fn closeness(&self, target: &Constraint) -> f64 {
        closeness(self.revealable.iter().chain(self.conveyable.iter()), target)
    }
}

fn closeness<'a>(cs: impl Iterator<Item = &'a Constraint>, target: &Constraint) -> f64 {
    cs.map(|c| 1.0 - c.normal().angle(&target.normal()) / std::f64::consts::PI)
        .fold(0.0, f64::max)
}

/// A domain's teaching material: KC bank plus candidate environments.
#[derive(Clone, Debug)]
pub struct Curriculum {
    pub domain: String,
    pub weights: Weights,
    pub prior: Constraints,
    pub bank: KcBank,
    pub candidates: Vec<Candidate>,
    pub budget: usize,
}

impl Curriculum {
    pub fn new(domain: &Domain) -> Result<Self> {
        Self::with_bank(domain, domain.kc_bank()?)
    }

    pub fn with_bank(domain: &Domain, bank: KcBank) -> Result<Self> {
        let specs = domain.teach_specs();
        let busiest = specs.iter().map(|s| s.env.feature_cell_count()).max().unwrap_or(0).max(1);
        let spread: Vec<Weights> = sample_region(&domain.prior, PRIOR_SPREAD, PRIOR_SPREAD_SEED)
            .into_iter()
            .filter_map(|v| RewardWeights::new(v).ok())
            .collect();
        let candidate = |spec: &Spec, start: State, revealable: Constraints| -> Result<Candidate> {
            let demo = optimal_trajectory(spec, &start)?;
            let conveyable = counterfactual_constraints(&spec.env, spec.gamma, spec.horizon, &demo, &spread)?;
            Ok(Candidate {
                spec: spec.clone(),
                complexity: spec.env.feature_cell_count() as f64 / busiest as f64,
                layout: layout(&spec.env, &start),
                demo,
                revealable,
                conveyable,
            })
        };
        let mut candidates = specs
            .iter()
            .map(|spec| candidate(spec, spec.env.start_state(), revealable_constraints(spec)?))
            .collect::<Result<Vec<_>>>()?;
        // A KC should be demonstrable, diagnosable and remediable in three
        // different environments. For KCs short of that, also start from
        // the first state (breadth-first) of each other environment that
        // reveals them.
        let envs_revealing = |cands: &[Candidate], k: &Kc| -> BTreeSet<String> {
            cands.iter().filter(|c| c.reveals(&k.constraint)).map(|c| c.id().to_string()).collect()
        };
        let scarce: Vec<(&Kc, BTreeSet<String>)> = bank
            .all_kcs()
            .map(|k| (k, envs_revealing(&candidates, k)))
            .filter(|(_, e)| e.len() < MIN_REVEALING_ENVS)
            .collect();
        if !scarce.is_empty() {
            for spec in &specs {
                let policy = solve(spec)?;
                let mut wanted: Vec<&Kc> =
                    scarce.iter().filter(|(_, e)| !e.contains(spec.env.id())).map(|(k, _)| *k).collect();
                for s in policy.graph().states() {
                    if wanted.is_empty() {
                        break;
                    }
                    if spec.env.is_goal(s) || *s == spec.env.start_state() {
                        continue;
                    }
                    let rev = revealable_from(spec, &policy, s)?;
                    let before = wanted.len();
                    wanted.retain(|k| !rev.iter().any(|c| c.same_as(&k.constraint)));
                    if wanted.len() < before {
                        candidates.push(candidate(spec, *s, rev)?);
                    }
                }
            }
        }
        Ok(Self {
            domain: domain.name().to_string(),
            weights: domain.weights,
            prior: domain.prior.clone(),
            bank,
            candidates,
            budget: domain.manifest.budget,
        })
    }

    pub fn candidate(&self, env_id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id() == env_id)
    }

    /// The bank KC with the same normal, if any.
    pub fn bank_kc(&self, c: &Constraint) -> Option<&Kc> {
        self.bank.all_kcs().find(|k| k.constraint.same_as(c))
    }
}

fn layout(env: &GridEnvironment, start: &State) -> BTreeSet<(i32, i32, u8)> {
    let mut out: BTreeSet<_> = env
        .cells()
        .iter()
        .map(|(c, a)| {
            let tag = match a {
                CellAttr::Wall => 0,
                CellAttr::Mud => 1,
                CellAttr::Recharge => 2,
                CellAttr::Path => 3,
                CellAttr::Skateboard => 4,
            };
            (c.0, c.1, tag)
        })
        .collect();
    out.insert((start.pos.0, start.pos.1, 10));
    out.insert((env.goal().0, env.goal().1, 11));
    out
}

/// Shared fraction (Jaccard) of two environments' drawn elements.
pub fn layout_similarity(a: &Candidate, b: &Candidate) -> f64 {
    if a.spec.env.width() != b.spec.env.width() || a.spec.env.height() != b.spec.env.height() {
        // Different canvases only share what overlaps by coordinate.
        let inter = a.layout.intersection(&b.layout).count() as f64;
        let union = a.layout.union(&b.layout).count().max(1) as f64;
        return 0.5 * inter / union;
    }
    let inter = a.layout.intersection(&b.layout).count() as f64;
    let union = a.layout.union(&b.layout).count().max(1) as f64;
    inter / union
}

/// `1 - max similarity` to any shown environment; 1 when nothing was shown.
pub fn dissimilarity(cur: &Curriculum, cand: &Candidate, shown: &[String]) -> f64 {
    shown
        .iter()
        .filter_map(|id| cur.candidate(id))
        .map(|s| layout_similarity(cand, s))
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .map_or(1.0, |m| 1.0 - m)
}

/// What the learner sent back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Incoming {
    /// Opens the session.
    Start,
    /// The learner has seen a demonstration or feedback.
    Ack,
    Response { trajectory: Trajectory },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Awaiting {
    Start,
    Ack { event: usize },
    Response { test: Box<TestSpec>, event: usize },
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Next {
    Event { event: InteractionEvent },
    Test { test: Box<TestSpec>, event: usize },
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeResult>,
    pub next: Next,
}

/// A missed KC awaiting remediation and how many rounds it has failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissedItem {
    pub kc: Kc,
    pub rounds: usize,
    /// Where it was last missed; remediation looks elsewhere.
    pub env_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeachingState {
    pub schema: String,
    pub domain: String,
    pub mode: Mode,
    pub config: TeachingConfig,
    pub budget: usize,
    pub lesson_queue: VecDeque<Lesson>,
    pub current_lesson: Option<Lesson>,
    pub phase: Phase,
    /// KCs of the current lesson still to be demonstrated.
    pub pending_demos: VecDeque<Kc>,
    pub pending_tests: VecDeque<TestSpec>,
    pub missed_kcs: VecDeque<MissedItem>,
    /// Failed rounds per KC id over the whole session.
    pub failure_rounds: BTreeMap<String, usize>,
    pub switch_s: bool,
    pub awaiting: Awaiting,
    pub history: Vec<InteractionEvent>,
    pub filter: Particles,
    /// Demonstrations and tests issued so far.
    pub interactions: usize,
    /// Completed passes over the bank.
    pub passes: usize,
    pub steps: u64,
    missed_seq: usize,
    /// Env of the remedial demo just shown, kept out of the remedial test.
    last_remedial_env: Option<String>,
}

impl TeachingState {
    pub fn new(cur: &Curriculum, config: TeachingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, 0);
        let filter = init_particles(&config.filter, &cur.prior, &mut rng)?;
        Ok(Self {
            schema: SESSION_SCHEMA.into(),
            domain: cur.domain.clone(),
            mode: config.mode,
            budget: config.budget.unwrap_or(cur.budget),
            config,
            lesson_queue: cur.bank.lessons.iter().cloned().collect(),
            current_lesson: None,
            phase: Phase::Demonstrating,
            pending_demos: VecDeque::new(),
            pending_tests: VecDeque::new(),
            missed_kcs: VecDeque::new(),
            failure_rounds: BTreeMap::new(),
            switch_s: false,
            awaiting: Awaiting::Start,
            history: Vec::new(),
            filter,
            interactions: 0,
            passes: 0,
            steps: 0,
            missed_seq: 0,
            last_remedial_env: None,
        })
    }

    pub fn is_done(&self) -> bool {
        matches!(self.awaiting, Awaiting::Done)
    }

    /// Environment ids of every demonstration shown so far.
    pub fn shown_demos(&self) -> Vec<String> {
        self.history.iter().filter(|e| e.kind.is_demo()).map(|e| e.env_id.clone()).collect()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.history.iter().filter(|e| e.kind == kind).count()
    }
}

fn stream(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn normals(cs: &Constraints) -> Vec<[f64; 3]> {
    cs.iter().map(|c| c.normal().to_f64()).collect()
}

/// Picks the demonstration that conveys `kc` while adding as few other new
/// constraints to the learner model as possible. Returns the candidate
/// index and the constraints the demonstration is expected to convey.
pub fn select_demonstration<R: rand::Rng + ?Sized>(
    cur: &Curriculum,
    kc: &Kc,
    ps: &Particles,
    shown: &[String],
    cfg: &TeachingConfig,
    rng: &mut R,
) -> Result<(usize, Constraints)> {
    let beliefs = sample_beliefs(ps, cfg.belief_samples, rng);
    let target = &kc.constraint;
    // (score, times shown, visual elements, id) ranks; higher score first.
    let mut best: Option<(f64, usize, usize, String, usize, Constraints)> = None;
    let mut fallback: Option<(f64, usize, usize, String, usize, Constraints)> = None;
    for (i, cand) in cur.candidates.iter().enumerate() {
        let spec = &cand.spec;
        let cs = counterfactual_constraints(&spec.env, spec.gamma, spec.horizon, &cand.demo, &beliefs)?;
        let new = cs.iter().filter(|c| ps.mass_violating(c) > cfg.implied_mass).count();
        let times = shown.iter().filter(|s| s.as_str() == cand.id()).count();
        let key = (spec.env.visual_element_count(), cand.id().to_string());
        if cs.iter().any(|c| c.same_as(target)) {
            let score = 1.0 - new.saturating_sub(1) as f64;
            let entry = (score, times, key.0, key.1, i, cs);
            if better(&entry, &best) {
                best = Some(entry);
            }
        } else if cand.reveals(target) {
            // Conveys the KC in principle, though no sampled belief would
            // currently produce the contrasting trajectory.
            let mut cs = cs;
            cs.insert(target.clone().with_source(cand.id()));
            let score = -(new as f64);
            let entry = (score, times, key.0, key.1, i, cs);
            if better(&entry, &fallback) {
                fallback = Some(entry);
            }
        }
    }
    best.or(fallback)
        .map(|(_, _, _, _, i, cs)| (i, cs))
        .ok_or_else(|| Error::CurriculumExhausted(kc.id.clone()))
}

fn better(
    a: &(f64, usize, usize, String, usize, Constraints),
    b: &Option<(f64, usize, usize, String, usize, Constraints)>,
) -> bool {
    let Some(b) = b else { return true };
    a.0.total_cmp(&b.0)
        .reverse()
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then_with(|| a.3.cmp(&b.3))
        .is_lt()
}

fn test_spec(cur: &Curriculum, idx: usize, kind: EventKind, target: Kc, covers: Vec<String>) -> TestSpec {
    let cand = &cur.candidates[idx];
    TestSpec {
        kind,
        env: cand.spec.env.clone(),
        start: cand.demo.start,
        correct: cand.demo.clone(),
        target_kc: target,
        covers,
    }
}

/// Diagnostic tests for a lesson: a greedy cover of its KCs by environments
/// that reveal them, preferring environments unlike the demonstrations and
/// visually busy. Environments already demonstrated are avoided.
pub fn select_diagnostic_test(cur: &Curriculum, lesson: &Lesson, shown: &[String], cfg: &TeachingConfig) -> Vec<TestSpec> {
    let mut uncovered: Vec<&Kc> = lesson.kcs.iter().collect();
    let mut used: Vec<String> = Vec::new();
    let mut out = Vec::new();
    let score = |c: &Candidate| cfg.alpha * dissimilarity(cur, c, shown) + cfg.beta * c.complexity;
    while !uncovered.is_empty() {
        let pick = cur
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| !shown.iter().any(|s| s == c.id()) && !used.iter().any(|u| u == c.id()))
            .map(|(i, c)| (i, uncovered.iter().filter(|k| c.reveals(&k.constraint)).count(), score(c)))
            .filter(|(_, n, _)| *n > 0)
            .max_by(|a, b| {
                a.1.cmp(&b.1)
                    .then(a.2.total_cmp(&b.2))
                    .then_with(|| cur.candidates[b.0].id().cmp(cur.candidates[a.0].id()))
            });
        match pick {
            Some((i, _, _)) => {
                let cand = &cur.candidates[i];
                let (hit, rest): (Vec<&Kc>, Vec<&Kc>) = uncovered.into_iter().partition(|k| cand.reveals(&k.constraint));
                uncovered = rest;
                used.push(cand.id().to_string());
                let covers = hit.iter().map(|k| k.id.clone()).collect();
                out.push(test_spec(cur, i, EventKind::DiagnosticTest, hit[0].clone(), covers));
            }
            None => {
                // Nothing unseen reveals the rest: least similar revealing env,
                // shown or not, else the least similar env overall.
                let kc = uncovered.remove(0);
                let pool: Vec<usize> = {
                    let revealing: Vec<usize> = (0..cur.candidates.len())
                        .filter(|&i| cur.candidates[i].reveals(&kc.constraint))
                        .collect();
                    if revealing.is_empty() { (0..cur.candidates.len()).collect() } else { revealing }
                };
                if let Some(i) = pool.into_iter().max_by(|&a, &b| {
                    score(&cur.candidates[a])
                        .total_cmp(&score(&cur.candidates[b]))
                        .then_with(|| cur.candidates[b].id().cmp(cur.candidates[a].id()))
                }) {
                    out.push(test_spec(cur, i, EventKind::DiagnosticTest, kc.clone(), vec![kc.id.clone()]));
                }
            }
        }
    }
    out
}

/// Whether the remedial step wants a demonstration or a test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Want {
    Demo,
    Test,
}

/// Remedial selection for a missed KC. Only environments that come closest
/// to the KC qualify (within [`NEAR_TOLERANCE`] of the best closeness,
/// `1 - angle / pi`); demonstrations are judged by their counterfactuals
/// against beliefs sampled from the model. Among those, demonstrations
/// prefer visual simplicity (`lambda` times complexity) and tests prefer
/// complexity plus dissimilarity to what was shown. `exclude` is never
/// picked.
pub fn select_remedial<R: rand::Rng + ?Sized>(
    cur: &Curriculum,
    missed: &Kc,
    ps: &Particles,
    shown: &[String],
    exclude: &[String],
    want: Want,
    cfg: &TeachingConfig,
    rng: &mut R,
) -> Result<(usize, Constraints)> {
    let target = &missed.constraint;
    let beliefs = match want {
        Want::Demo => sample_beliefs(ps, cfg.belief_samples, rng),
        Want::Test => Vec::new(),
    };
    // (index, closeness, preference, conveyed)
    let mut scored: Vec<(usize, f64, f64, Constraints)> = Vec::new();
    for (i, cand) in cur.candidates.iter().enumerate() {
        if exclude.iter().any(|e| e == cand.id()) {
            continue;
        }
        match want {
            Want::Demo => {
                let spec = &cand.spec;
                let mut cs = counterfactual_constraints(&spec.env, spec.gamma, spec.horizon, &cand.demo, &beliefs)?;
                let mut near = closeness(cs.iter(), target);
                if cand.reveals(target) {
                    cs.insert(target.clone().with_source(cand.id()));
                    near = 1.0;
                }
                if !cs.is_empty() {
                    scored.push((i, near, -cfg.lambda * cand.complexity, cs));
                }
            }
            Want::Test => {
                let near = if cand.reveals(target) { 1.0 } else { cand.closeness(target) };
                let pref = cfg.lambda * cand.complexity + dissimilarity(cur, cand, shown);
                scored.push((i, near, pref, ConstraintSet::from_vec(vec![target.clone()])));
            }
        }
    }
    let best_near = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    // Ties go to the least shown, then least busy, then first in the pool.
    let rank = |i: usize| {
        let c = &cur.candidates[i];
        (shown.iter().filter(|s| s.as_str() == c.id()).count(), c.spec.env.visual_element_count())
    };
    scored
        .into_iter()
        .filter(|s| s.1 >= best_near - NEAR_TOLERANCE)
        .fold(None, |best: Option<(usize, f64, f64, Constraints)>, s| match &best {
            Some(b) if s.2 < b.2 - 1e-12 || (s.2 < b.2 + 1e-12 && rank(s.0) >= rank(b.0)) => best,
            _ => Some(s),
        })
        .map(|(i, _, _, cs)| (i, cs))
        .ok_or_else(|| Error::CurriculumExhausted(missed.id.clone()))
}

/// Grades `response` by reward under the true weights; a wrong answer
/// yields the missed KC and a feedback event showing both trajectories.
pub fn grade_and_feedback(spec: &Spec, test: &TestSpec, response: &Trajectory) -> Result<GradeResult> {
    check_legal(&spec.env, response)?;
    let missed = test_response_constraint(spec, &test.correct, response)?;
    let w = &spec.weights;
    let best = trajectory_reward(&test.correct, &spec.env, w, spec.gamma)?;
    let got = trajectory_reward(response, &spec.env, w, spec.gamma)?;
    let regret = (best - got).max(0.0);
    Ok(match missed {
        None => GradeResult { correct: true, missed_kc: None, regret, feedback: None },
        Some(c) => {
            let kc = KnowledgeComponent::new("missed", c);
            let feedback = InteractionEvent {
                index: 0,
                kind: EventKind::Feedback,
                env_id: spec.env.id().to_string(),
                start: test.start,
                trajectory: Some(test.correct.clone()),
                response: Some(response.clone()),
                correct: Some(false),
                kc_ids: vec![],
                constraints: vec![kc.constraint.normal().to_f64()],
            };
            GradeResult { correct: false, missed_kc: Some(kc), regret, feedback: Some(feedback) }
        }
    })
}

fn check_legal(env: &GridEnvironment, t: &Trajectory) -> Result<()> {
    let mut s = t.start;
    for (k, st) in t.steps.iter().enumerate() {
        if st.state != s {
            return Err(Error::InvalidTrajectory(format!("step {k} does not continue from the previous state")));
        }
        match env.step(&s, st.action) {
            Some((n, _)) if n == st.next => s = n,
            _ => return Err(Error::InvalidTrajectory(format!("step {k}: {} is illegal here", st.action.name()))),
        }
    }
    Ok(())
}

fn spec_of<'a>(cur: &'a Curriculum, env_id: &str) -> Result<&'a MDPSpec<f64>> {
    cur.candidate(env_id)
        .map(|c| &c.spec)
        .ok_or_else(|| Error::Protocol(format!("unknown environment {env_id}")))
}

/// Advances the loop by one learner input.
pub fn step(cur: &Curriculum, state: &TeachingState, incoming: &Incoming) -> Result<(TeachingState, Outcome)> {
    let mut st = state.clone();
    st.steps += 1;
    let mut rng = stream(st.config.seed, st.steps);
    let mut grade = None;
    let awaiting = std::mem::replace(&mut st.awaiting, Awaiting::Done);
    match (awaiting, incoming) {
        (Awaiting::Start, Incoming::Start) | (Awaiting::Ack { .. }, Incoming::Ack) => {}
        (Awaiting::Response { test, event }, Incoming::Response { trajectory }) => {
            let (g, feedback) = on_response(cur, &mut st, &test, event, trajectory, &mut rng)?;
            grade = Some(g);
            if let Some(ev) = feedback {
                st.awaiting = Awaiting::Ack { event: ev.index };
                return Ok((st, Outcome { grade, next: Next::Event { event: ev } }));
            }
        }
        (Awaiting::Done, _) => return Err(Error::Protocol("session is finished".into())),
        (a, i) => {
            let want = match a {
                Awaiting::Start => "start",
                Awaiting::Ack { .. } => "ack",
                Awaiting::Response { .. } => "response",
                Awaiting::Done => "nothing",
            };
            let got = match i {
                Incoming::Start => "start",
                Incoming::Ack => "ack",
                Incoming::Response { .. } => "response",
            };
            return Err(Error::Protocol(format!("expected {want}, got {got}")));
        }
    }
    let next = advance(cur, &mut st, &mut rng)?;
    Ok((st, Outcome { grade, next }))
}

fn missed_kc(cur: &Curriculum, st: &mut TeachingState, c: &Constraint) -> Kc {
    match cur.bank_kc(c) {
        Some(k) => KnowledgeComponent::new(k.id.clone(), c.clone()),
        None => {
            st.missed_seq += 1;
            KnowledgeComponent::new(format!("missed{}", st.missed_seq), c.clone())
        }
    }
}

fn feed(st: &mut TeachingState, cs: &Constraints, rng: &mut ChaCha8Rng) {
    for c in cs.iter() {
        st.filter = update(&st.filter, Some(c), &st.config.filter, rng).0;
    }
}

fn on_response(
    cur: &Curriculum,
    st: &mut TeachingState,
    test: &TestSpec,
    event: usize,
    response: &Trajectory,
    rng: &mut ChaCha8Rng,
) -> Result<(GradeResult, Option<InteractionEvent>)> {
    let spec = spec_of(cur, test.env.id())?;
    let mut g = match grade_and_feedback(spec, test, response) {
        Ok(g) => g,
        Err(e) => {
            // Stay in the same phase so the learner can resubmit.
            st.awaiting = Awaiting::Response { test: Box::new(test.clone()), event };
            return Err(e);
        }
    };
    {
        let ev = &mut st.history[event];
        ev.response = Some(response.clone());
        ev.correct = Some(g.correct);
    }
    let is_remedial = test.kind == EventKind::RemedialTest;
    if g.correct {
        if st.config.update_on_correct {
            let cs = ConstraintSet::from_vec(vec![test.target_kc.constraint.clone()]);
            feed(st, &cs, rng);
            st.history[event].constraints = normals(&cs);
        }
        if is_remedial {
            st.missed_kcs.pop_front();
            st.phase = if st.missed_kcs.is_empty() {
                Phase::Diagnostic
            } else if st.switch_s {
                Phase::TestsOnly
            } else {
                Phase::RemedialDemo
            };
        }
        return Ok((g, None));
    }
    let raw = g.missed_kc.take().expect("incorrect answers carry a missed KC");
    let kc = missed_kc(cur, st, &raw.constraint);
    let cs = ConstraintSet::from_vec(vec![kc.constraint.clone()]);
    feed(st, &cs, rng);
    *st.failure_rounds.entry(kc.id.clone()).or_default() += 1;
    g.missed_kc = Some(kc.clone());
    if st.mode == Mode::Full {
        if is_remedial {
            let item = st.missed_kcs.front_mut().expect("remedial test without a missed KC");
            item.rounds += 1;
            item.kc = kc.clone();
            item.env_id = test.env.id().to_string();
            let rounds = item.rounds;
            if rounds >= st.config.max_remedial_rounds {
                st.missed_kcs.pop_front();
            } else if rounds >= st.config.switch_after {
                st.switch_s = true;
            }
            st.phase = if st.missed_kcs.is_empty() {
                Phase::Diagnostic
            } else if st.switch_s {
                Phase::TestsOnly
            } else {
                Phase::RemedialDemo
            };
        } else {
            st.missed_kcs.push_back(MissedItem { kc: kc.clone(), rounds: 1, env_id: test.env.id().to_string() });
        }
    }
    if st.mode == Mode::Open {
        return Ok((g, None));
    }
    let mut fb = g.feedback.clone().expect("incorrect answers carry feedback");
    fb.index = st.history.len();
    fb.kc_ids = vec![kc.id.clone()];
    st.history.push(fb.clone());
    g.feedback = Some(fb.clone());
    Ok((g, Some(fb)))
}

fn advance(cur: &Curriculum, st: &mut TeachingState, rng: &mut ChaCha8Rng) -> Result<Next> {
    loop {
        if st.phase == Phase::Done || st.interactions >= st.budget {
            return Ok(finish(st));
        }
        match st.phase {
            Phase::Demonstrating => {
                if st.current_lesson.is_none() {
                    if !next_lesson(cur, st) {
                        return Ok(finish(st));
                    }
                    continue;
                }
                if let Some(kc) = st.pending_demos.pop_front() {
                    let shown = st.shown_demos();
                    let (i, cs) = select_demonstration(cur, &kc, &st.filter, &shown, &st.config, rng)?;
                    return Ok(emit_demo(cur, st, i, cs, EventKind::Demonstration, vec![kc.id.clone()], rng));
                }
                if st.mode == Mode::Open {
                    st.current_lesson = None;
                    continue;
                }
                let lesson = st.current_lesson.clone().expect("lesson in progress");
                let shown = st.shown_demos();
                st.pending_tests = select_diagnostic_test(cur, &lesson, &shown, &st.config).into();
                st.phase = Phase::Diagnostic;
            }
            Phase::Diagnostic => {
                if let Some(t) = st.pending_tests.pop_front() {
                    return Ok(emit_test(st, t));
                }
                if st.mode == Mode::Full && !st.missed_kcs.is_empty() {
                    st.phase = if st.switch_s { Phase::TestsOnly } else { Phase::RemedialDemo };
                    continue;
                }
                st.current_lesson = None;
                st.phase = Phase::Demonstrating;
            }
            Phase::RemedialDemo => {
                let item = st.missed_kcs.front().expect("remediating a missed KC").clone();
                let shown = st.shown_demos();
                let exclude = [item.env_id.clone()];
                let (i, cs) = select_remedial(cur, &item.kc, &st.filter, &shown, &exclude, Want::Demo, &st.config, rng)?;
                st.last_remedial_env = Some(cur.candidates[i].id().to_string());
                st.phase = Phase::RemedialTest;
                return Ok(emit_demo(cur, st, i, cs, EventKind::RemedialDemonstration, vec![item.kc.id.clone()], rng));
            }
            Phase::RemedialTest | Phase::TestsOnly => {
                let item = st.missed_kcs.front().expect("remediating a missed KC").clone();
                let shown = st.shown_demos();
                let mut exclude: Vec<String> = st.last_remedial_env.iter().cloned().collect();
                exclude.push(item.env_id.clone());
                let (i, _) = select_remedial(cur, &item.kc, &st.filter, &shown, &exclude, Want::Test, &st.config, rng)?;
                let t = test_spec(cur, i, EventKind::RemedialTest, item.kc.clone(), vec![item.kc.id.clone()]);
                return Ok(emit_test(st, t));
            }
            Phase::Done => unreachable!(),
        }
    }
}

fn next_lesson(cur: &Curriculum, st: &mut TeachingState) -> bool {
    if st.lesson_queue.is_empty() {
        st.passes += 1;
        if !st.config.review || cur.bank.lessons.is_empty() {
            return false;
        }
        st.lesson_queue = cur.bank.lessons.iter().cloned().collect();
    }
    let lesson = st.lesson_queue.pop_front().expect("queue refilled");
    st.pending_demos = lesson.kcs.iter().cloned().collect();
    st.pending_tests.clear();
    st.missed_kcs.clear();
    st.switch_s = false;
    st.last_remedial_env = None;
    st.current_lesson = Some(lesson);
    st.phase = Phase::Demonstrating;
    true
}

fn finish(st: &mut TeachingState) -> Next {
    st.phase = Phase::Done;
    st.switch_s = false;
    st.awaiting = Awaiting::Done;
    Next::Done
}

fn emit_demo(
    cur: &Curriculum,
    st: &mut TeachingState,
    idx: usize,
    cs: Constraints,
    kind: EventKind,
    kc_ids: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> Next {
    let cand = &cur.candidates[idx];
    feed(st, &cs, rng);
    let event = InteractionEvent {
        index: st.history.len(),
        kind,
        env_id: cand.id().to_string(),
        start: cand.demo.start,
        trajectory: Some(cand.demo.clone()),
        response: None,
        correct: None,
        kc_ids,
        constraints: normals(&cs),
    };
    st.history.push(event.clone());
    st.interactions += 1;
    st.awaiting = Awaiting::Ack { event: event.index };
    Next::Event { event }
}

fn emit_test(st: &mut TeachingState, t: TestSpec) -> Next {
    let index = st.history.len();
    st.history.push(InteractionEvent {
        index,
        kind: t.kind,
        env_id: t.env.id().to_string(),
        start: t.start,
        trajectory: None,
        response: None,
        correct: None,
        kc_ids: t.covers.clone(),
        constraints: vec![],
    });
    st.interactions += 1;
    st.awaiting = Awaiting::Response { test: Box::new(t.clone()), event: index };
    Next::Test { test: Box::new(t), event: index }
}

/// Rebuilds a session from its inputs.
pub fn replay(cur: &Curriculum, config: TeachingConfig, inputs: &[Incoming]) -> Result<TeachingState> {
    let mut st = TeachingState::new(cur, config)?;
    for (k, i) in inputs.iter().enumerate() {
        st = step(cur, &st, i).map_err(|e| Error::ReplayDiverged { index: k, message: e.to_string() })?.0;
    }
    Ok(st)
}

/// Spherical area left by the constraints a test in `cand` can reveal;
/// smaller means harder to answer.
pub fn test_difficulty(cand: &Candidate, prior: &Constraints) -> f64 {
    let cs = prior.merged(&cand.revealable);
    bec_area_with(&cs, 200_000, 0x7465_7374).fraction
}

/// Feature counts of the demonstration in candidate `idx`.
pub fn demo_counts(cur: &Curriculum, idx: usize) -> Result<crate::Features> {
    let c = &cur.candidates[idx];
    feature_counts(&c.spec.env, &c.demo, c.spec.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::load_domain;
    use crate::mdp::RewardWeights;
    use crate::sphere::Vec3;
    use std::path::PathBuf;

    fn curriculum(name: &str) -> Curriculum {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/domains").join(name);
        Curriculum::new(&load_domain(&dir).unwrap()).unwrap()
    }

    /// Answers with the optimal trajectory under `w`.
    fn planner(cur: &Curriculum, w: [f64; 3]) -> impl Fn(&TestSpec) -> Trajectory + '_ {
        move |t| {
            let spec = cur.candidate(t.env.id()).unwrap().spec.with_weights(RewardWeights::from_proportions(Vec3::from_f64(w)).unwrap());
            optimal_trajectory(&spec, &t.start).unwrap()
        }
    }

    fn drive(
        cur: &Curriculum,
        cfg: TeachingConfig,
        answer: impl Fn(&TestSpec) -> Trajectory,
    ) -> (TeachingState, Vec<Incoming>) {
        let mut st = TeachingState::new(cur, cfg).unwrap();
        let mut inputs = vec![Incoming::Start];
        let (mut s, mut out) = step(cur, &st, &Incoming::Start).unwrap();
        loop {
            st = s;
            let input = match out.next {
                Next::Done => break,
                Next::Event { .. } => Incoming::Ack,
                Next::Test { test, .. } => Incoming::Response { trajectory: answer(&test) },
            };
            inputs.push(input.clone());
            (s, out) = step(cur, &st, &input).unwrap();
            assert!(inputs.len() < 500, "session does not terminate");
        }
        (st, inputs)
    }

    fn kinds(st: &TeachingState) -> Vec<EventKind> {
        st.history.iter().map(|e| e.kind).collect()
    }

    #[test]
    fn expert_learner_sees_every_kc_demonstrated_and_tested() {
        let cur = curriculum("delivery");
        let w = cur.weights.vector().to_f64();
        let cfg = TeachingConfig { review: false, budget: Some(100), ..Default::default() };
        let (st, _) = drive(&cur, cfg, planner(&cur, w));
        let n_kcs = cur.bank.all_kcs().count();
        assert_eq!(st.count(EventKind::Demonstration), n_kcs);
        assert_eq!(st.count(EventKind::Feedback), 0);
        assert_eq!(st.count(EventKind::RemedialDemonstration), 0);
        assert!(st.history.iter().filter(|e| e.kind.is_test()).all(|e| e.correct == Some(true)));
        // every KC is covered by some diagnostic
        let covered: BTreeSet<&String> =
            st.history.iter().filter(|e| e.kind == EventKind::DiagnosticTest).flat_map(|e| &e.kc_ids).collect();
        assert_eq!(covered.len(), n_kcs);
        assert_eq!(st.passes, 1);
        assert!(st.is_done());
    }

    #[test]
    fn tests_never_reuse_a_demonstrated_environment() {
        let cur = curriculum("skateboard");
        let w = cur.weights.vector().to_f64();
        let cfg = TeachingConfig { review: false, budget: Some(100), ..Default::default() };
        let (st, _) = drive(&cur, cfg, planner(&cur, w));
        let shown = st.shown_demos();
        for e in st.history.iter().filter(|e| e.kind == EventKind::DiagnosticTest) {
            assert!(!shown.contains(&e.env_id), "{} was demonstrated", e.env_id);
        }
    }

    #[test]
    fn wrong_answer_triggers_feedback_then_remediation() {
        let cur = curriculum("delivery");
        // ignores mud: walks straight through it
        let (st, _) = drive(&cur, TeachingConfig { budget: Some(9), ..Default::default() }, planner(&cur, [0.0, 0.0, -1.0]));
        let k = kinds(&st);
        let first_fb = k.iter().position(|k| *k == EventKind::Feedback).expect("feedback given");
        assert_eq!(k[first_fb - 1], EventKind::DiagnosticTest);
        assert!(k[first_fb + 1..].contains(&EventKind::RemedialDemonstration), "{k:?}");
        let fb = &st.history[first_fb];
        assert!(fb.trajectory.is_some() && fb.response.is_some());
        // a learner that never improves flips switch S: tests only afterwards
        let rd = k.iter().filter(|k| **k == EventKind::RemedialDemonstration).count();
        assert!(rd <= cur.bank.lessons.len() * 1, "{k:?}");
    }

    #[test]
    fn open_mode_only_demonstrates() {
        let cur = curriculum("delivery");
        let cfg = TeachingConfig { mode: Mode::Open, review: false, budget: Some(100), ..Default::default() };
        let (st, _) = drive(&cur, cfg, |_| unreachable!());
        assert!(st.history.iter().all(|e| e.kind == EventKind::Demonstration));
        assert_eq!(st.history.len(), cur.bank.all_kcs().count());
    }

    #[test]
    fn partial_mode_gives_feedback_but_no_remediation() {
        let cur = curriculum("delivery");
        let cfg = TeachingConfig { mode: Mode::Partial, review: false, budget: Some(100), ..Default::default() };
        let (st, _) = drive(&cur, cfg, planner(&cur, [0.0, 0.0, -1.0]));
        let k = kinds(&st);
        assert!(k.contains(&EventKind::Feedback));
        assert!(!k.contains(&EventKind::RemedialDemonstration) && !k.contains(&EventKind::RemedialTest));
    }

    #[test]
    fn budget_caps_demonstrations_plus_tests() {
        let cur = curriculum("skateboard");
        for budget in [1, 5, 22] {
            let cfg = TeachingConfig { budget: Some(budget), ..Default::default() };
            let (st, _) = drive(&cur, cfg, planner(&cur, [0.0, 0.0, -1.0]));
            let counted = st.history.iter().filter(|e| e.kind != EventKind::Feedback).count();
            assert_eq!(counted, budget);
        }
    }

    #[test]
    fn replay_reproduces_the_state() {
        let cur = curriculum("delivery");
        let cfg = TeachingConfig { seed: 7, ..Default::default() };
        let (st, inputs) = drive(&cur, cfg.clone(), planner(&cur, [-0.3, 0.2, -1.0]));
        let again = replay(&cur, cfg, &inputs).unwrap();
        assert_eq!(serde_json::to_string(&st).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn out_of_phase_inputs_are_protocol_errors() {
        let cur = curriculum("delivery");
        let st = TeachingState::new(&cur, TeachingConfig::default()).unwrap();
        assert!(matches!(step(&cur, &st, &Incoming::Ack), Err(Error::Protocol(_))));
        let (st, out) = step(&cur, &st, &Incoming::Start).unwrap();
        assert!(matches!(out.next, Next::Event { .. }));
        let bogus = Incoming::Response { trajectory: Trajectory::empty(st.history[0].start) };
        assert!(matches!(step(&cur, &st, &bogus), Err(Error::Protocol(_))));
    }

    #[test]
    fn illegal_response_keeps_the_test_open() {
        let cur = curriculum("delivery");
        let cfg = TeachingConfig { budget: Some(100), ..Default::default() };
        let mut st = TeachingState::new(&cur, cfg).unwrap();
        let mut inc = Incoming::Start;
        let test = loop {
            let (s, out) = step(&cur, &st, &inc).unwrap();
            st = s;
            match out.next {
                Next::Test { test, .. } => break test,
                _ => inc = Incoming::Ack,
            }
        };
        let bad = Incoming::Response { trajectory: Trajectory::empty(test.start) };
        assert!(matches!(step(&cur, &st, &bad), Err(Error::InvalidTrajectory(_))));
        let good = Incoming::Response { trajectory: test.correct.clone() };
        let (_, out) = step(&cur, &st, &good).unwrap();
        assert!(out.grade.unwrap().correct);
    }

    #[test]
    fn grading_accepts_any_reward_optimal_answer() {
        let cur = curriculum("delivery");
        let c = cur.candidate("delivery-d01").unwrap();
        let t = test_spec(&cur, 0, EventKind::DiagnosticTest, cur.bank.all_kcs().next().unwrap().clone(), vec![]);
        assert_eq!(t.env.id(), c.id());
        let g = grade_and_feedback(&c.spec, &t, &c.demo).unwrap();
        assert!(g.correct && g.regret.abs() < 1e-12);
        // through the mud
        let straight = planner(&cur, [0.0, 0.0, -1.0])(&t);
        let g = grade_and_feedback(&c.spec, &t, &straight).unwrap();
        assert!(!g.correct && g.regret > 0.0);
        let kc = g.missed_kc.unwrap();
        let w = cur.weights.vector();
        assert!(kc.constraint.satisfied_by(&w));
    }
}

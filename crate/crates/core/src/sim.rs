//! Simulated learners and the desk-scale study harness.
//!
//! A simulated learner is an IRL-like reasoner built from the same particle
//! filter the teacher uses to model it: demonstrations are compared with the
//! learner's own counterfactual plans, feedback contributes the constraint
//! separating the correct answer from its own. Answers are planned under a
//! belief drawn from its posterior, with temperature noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bec::{bec_area_with, constraint_from_pair, counterfactual_constraints, revealable_constraints, Provenance};
use crate::beliefs::{init_particles, jitter, sample_beliefs, update_many, FilterConfig};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::mdp::{feature_counts, optimal_trajectory, solve_from, trajectory_reward, State, Trajectory};
use crate::teaching::{step, Curriculum, EventKind, Incoming, InteractionEvent, Mode, Next, TeachingConfig, TeachingState};
use crate::{Constraints, Particles, Spec, Weights};

pub const STUDY_SCHEMA: &str = "study/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Sharper likelihood: each constraint moves the posterior further.
    Fast,
    Slow,
    /// Posterior diffuses a little after every event.
    Forgetful,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Fast, Profile::Slow, Profile::Forgetful];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Fast => "fast",
            Profile::Slow => "slow",
            Profile::Forgetful => "forgetful",
        }
    }

    fn kappa_scale(self) -> f64 {
        match self {
            Profile::Fast => 2.0,
            Profile::Slow => 0.5,
            Profile::Forgetful => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Softmax temperature over sampled beliefs when answering; 0 answers
    /// with the densest one.
    pub temperature: f64,
    /// Own beliefs a demonstration is contrasted with; 1 compares it with
    /// what the learner itself would have done.
    pub counterfactual_samples: usize,
    /// Beliefs an answer is drawn from.
    pub answer_samples: usize,
    /// vMF kernel concentration for the posterior density estimate.
    pub density_kappa: f64,
    /// Per-event diffusion of the forgetful profile.
    pub forget_kappa: f64,
    /// Base filter; the profile scales its `kappa`.
    pub filter: FilterConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            counterfactual_samples: 2,
            answer_samples: 8,
            density_kappa: 50.0,
            forget_kappa: 200.0,
            filter: FilterConfig { kappa: 8.0, ..FilterConfig::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedLearner {
    pub filter: Particles,
    pub profile: Profile,
    pub config: LearnerConfig,
    pub seed: u64,
    filter_cfg: FilterConfig,
    rng: ChaCha8Rng,
}

impl SimulatedLearner {
    /// A learner whose beliefs start uniform on `prior`.
    pub fn new(prior: &Constraints, profile: Profile, config: LearnerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filter_cfg = FilterConfig { kappa: config.filter.kappa * profile.kappa_scale(), ..config.filter.clone() };
        let filter = init_particles(&filter_cfg, prior, &mut rng)?;
        Ok(Self { filter, profile, config, seed, filter_cfg, rng })
    }

    /// A learner that already holds `w` (every particle there).
    pub fn at(w: &Weights, prior: &Constraints, profile: Profile, config: LearnerConfig, seed: u64) -> Self {
        let filter_cfg = FilterConfig { kappa: config.filter.kappa * profile.kappa_scale(), ..config.filter.clone() };
        let filter = Particles::point_mass(w.vector(), filter_cfg.n, prior.clone());
        Self { filter, profile, config, seed, filter_cfg, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn filter_config(&self) -> &FilterConfig {
        &self.filter_cfg
    }

    fn absorb(&mut self, cs: &Constraints) {
        if cs.is_empty() {
            return;
        }
        self.filter = update_many(&self.filter, cs.iter(), &self.filter_cfg, &mut self.rng).0;
        if self.profile == Profile::Forgetful {
            self.filter = jitter(&self.filter, self.config.forget_kappa, &mut self.rng);
        }
    }
}

/// Updates the learner with a demonstration or feedback event shown in
/// `spec`'s environment. Other events are ignored. Returns the constraints
/// the learner took from it.
pub fn learner_observe(learner: &mut SimulatedLearner, spec: &Spec, event: &InteractionEvent) -> Result<Constraints> {
    let cs = match event.kind {
        EventKind::Demonstration | EventKind::RemedialDemonstration => {
            let Some(demo) = &event.trajectory else { return Ok(Constraints::new()) };
            let beliefs = sample_beliefs(&learner.filter, learner.config.counterfactual_samples, &mut learner.rng);
            counterfactual_constraints(&spec.env, spec.gamma, spec.horizon, demo, &beliefs)?
        }
        EventKind::Feedback => {
            let (Some(correct), Some(mine)) = (&event.trajectory, &event.response) else {
                return Ok(Constraints::new());
            };
            let a = feature_counts(&spec.env, correct, spec.gamma)?;
            let b = feature_counts(&spec.env, mine, spec.gamma)?;
            Constraints::from_vec(constraint_from_pair(&a, &b, Provenance::TestResponse).into_iter().collect())
        }
        _ => Constraints::new(),
    };
    learner.absorb(&cs);
    Ok(cs)
}

/// Unnormalized vMF kernel density of the posterior at `x`.
fn density(ps: &Particles, x: &crate::Vector, kappa: f64) -> f64 {
    ps.particles.iter().map(|p| p.weight * (kappa * (p.position.dot(x) - 1.0)).exp()).sum()
}

/// The beliefs the learner might answer under and their probabilities:
/// a softmax of log posterior density at the configured temperature, or
/// all mass on the densest belief at temperature 0.
pub fn answer_distribution(learner: &mut SimulatedLearner) -> Vec<(Weights, f64)> {
    let beliefs = sample_beliefs(&learner.filter, learner.config.answer_samples, &mut learner.rng);
    let logd: Vec<f64> = beliefs
        .iter()
        .map(|b| density(&learner.filter, &b.vector(), learner.config.density_kappa).max(f64::MIN_POSITIVE).ln())
        .collect();
    let t = learner.config.temperature;
    let p: Vec<f64> = if t <= 0.0 {
        // first maximum: sample_beliefs leads with the heaviest candidate
        let best = logd.iter().enumerate().fold(0, |b, (i, v)| if *v > logd[b] { i } else { b });
        (0..logd.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    } else {
        let top = logd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logd.iter().map(|v| ((v - top) / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    beliefs.into_iter().zip(p).collect()
}

/// Draws the belief the learner answers under.
pub fn choose_belief(learner: &mut SimulatedLearner) -> Weights {
    let dist = answer_distribution(learner);
    let mut u = learner.rng.random::<f64>();
    for (w, p) in &dist {
        if u < *p {
            return *w;
        }
        u -= p;
    }
    dist.iter().rev().find(|(_, p)| *p > 0.0).map_or(dist[0].0, |(w, _)| *w)
}

/// Plans an answer from `start` in `spec`'s environment under a belief drawn
/// from the learner's posterior.
pub fn learner_answer(learner: &mut SimulatedLearner, spec: &Spec, start: &State) -> Result<Trajectory> {
    let w = choose_belief(learner);
    optimal_trajectory(&spec.with_weights(w), start)
}

/// Regret of the learner's answer averaged over its answer distribution
/// rather than drawn once: same mean as [`learner_answer`]'s regret, far
/// less spread.
pub fn expected_regret(learner: &mut SimulatedLearner, spec: &Spec, start: &State) -> Result<f64> {
    let mut total = 0.0;
    for (w, p) in answer_distribution(learner) {
        if p > 0.0 {
            total += p * regret(spec, &optimal_trajectory(&spec.with_weights(w), start)?)?;
        }
    }
    Ok(total)
}

/// Optimal reward minus the answer's reward under `spec.weights`; float
/// noise below zero is clipped.
pub fn regret(spec: &Spec, answer: &Trajectory) -> Result<f64> {
    let best = solve_from(spec, &answer.start)?.start_value();
    let got = trajectory_reward(answer, &spec.env, &spec.weights, spec.gamma)?;
    Ok((best - got).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Low,
    Medium,
    High,
}

/// Labels held-out tests by the area of the region their answer requires:
/// the smallest third high, the largest third low.
pub fn difficulty_labels(specs: &[Spec], prior: &Constraints) -> Result<Vec<(f64, Difficulty)>> {
    let areas = specs
        .iter()
        .map(|s| Ok(bec_area_with(&prior.merged(&revealable_constraints(s)?), 200_000, 0xd1ff).fraction))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| areas[a].total_cmp(&areas[b]).then(a.cmp(&b)));
    let mut out = vec![(0.0, Difficulty::Low); areas.len()];
    let n = areas.len();
    for (rank, &i) in order.iter().enumerate() {
        let d = match rank * 3 / n.max(1) {
            0 => Difficulty::High,
            1 => Difficulty::Medium,
            _ => Difficulty::Low,
        };
        out[i] = (areas[i], d);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRegret {
    pub env_id: String,
    pub difficulty: Difficulty,
    /// Regret of the answer the learner gave.
    pub regret: f64,
    /// Mean regret over the learner's answer distribution.
    pub expected_regret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub domain: String,
    pub mode: Mode,
    pub profile: Profile,
    pub seed: u64,
    /// Demonstrations plus tests during teaching.
    pub interactions: usize,
    pub events: usize,
    pub tests: Vec<TestRegret>,
    pub mean_regret: f64,
    pub mean_expected_regret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A finished session: result, final controller state and its inputs.
#[derive(Clone, Debug)]
pub struct Session {
    pub result: SessionResult,
    pub state: TeachingState,
    pub inputs: Vec<Incoming>,
}

/// Held-out tests with difficulty labels, ready to administer.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub specs: Vec<Spec>,
    pub labels: Vec<(f64, Difficulty)>,
}

impl HeldOut {
    pub fn new(domain: &Domain) -> Result<Self> {
        let specs = domain.heldout_specs();
        let labels = difficulty_labels(&specs, &domain.prior)?;
        Ok(Self { specs, labels })
    }
}

/// Teaches `learner` under `teaching`, then has it answer every held-out
/// test. A controller error ends teaching early and is recorded.
pub fn run_session(
    cur: &Curriculum,
    heldout: &HeldOut,
    teaching: TeachingConfig,
    learner: &mut SimulatedLearner,
) -> Result<Session> {
    let mode = teaching.mode;
    let mut st = TeachingState::new(cur, teaching)?;
    let mut inputs = vec![];
    let mut input = Incoming::Start;
    let mut error = None;
    loop {
        let (next_st, out) = match step(cur, &st, &input) {
            Ok(r) => r,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        inputs.push(input);
        st = next_st;
        input = match out.next {
            Next::Done => break,
            Next::Event { event } => {
                let spec = &cur.candidate(&event.env_id).expect("events name pool environments").spec;
                learner_observe(learner, spec, &event)?;
                Incoming::Ack
            }
            Next::Test { test, .. } => {
                let spec = &cur.candidate(test.env.id()).expect("tests name pool environments").spec;
                Incoming::Response { trajectory: learner_answer(learner, spec, &test.start)? }
            }
        };
    }
    let mut tests = Vec::with_capacity(heldout.specs.len());
    for (spec, (_, difficulty)) in heldout.specs.iter().zip(&heldout.labels) {
        let start = spec.env.start_state();
        let answer = learner_answer(learner, spec, &start)?;
        tests.push(TestRegret {
            env_id: spec.env.id().to_string(),
            difficulty: *difficulty,
            regret: regret(spec, &answer)?,
            expected_regret: expected_regret(learner, spec, &start)?,
        });
    }
    let mean_regret = mean(tests.iter().map(|t| t.regret));
    let mean_expected_regret = mean(tests.iter().map(|t| t.expected_regret));
    let result = SessionResult {
        domain: cur.domain.clone(),
        mode,
        profile: learner.profile,
        seed: learner.seed,
        interactions: st.interactions,
        events: st.history.len(),
        tests,
        mean_regret,
        mean_expected_regret,
        error,
    };
    Ok(Session { result, state: st, inputs })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

/// Which per-session regret the study aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretMetric {
    /// The answers actually given.
    Sampled,
    /// Averaged over each learner's answer distribution.
    Expected,
}

impl SessionResult {
    pub fn regret_by(&self, m: RegretMetric) -> f64 {
        match m {
            RegretMetric::Sampled => self.mean_regret,
            RegretMetric::Expected => self.mean_expected_regret,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub modes: Vec<Mode>,
    pub domains: Vec<String>,
    pub learners_per_cell: usize,
    /// Interaction budget per domain; each domain's own when absent.
    pub budgets: BTreeMap<String, usize>,
    /// Learner profiles, assigned round-robin by learner index.
    pub profiles: Vec<Profile>,
    pub learner: LearnerConfig,
    pub teaching: TeachingConfig,
    /// Learner `i` uses seed `seed + i` in every cell, so cells are paired.
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub metric: RegretMetric,
    /// Where to write each session's `session/v1` log, if anywhere.
    pub log_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            domains: vec!["delivery".into(), "skateboard".into()],
            learners_per_cell: 50,
            budgets: BTreeMap::new(),
            profiles: Profile::ALL.to_vec(),
            learner: LearnerConfig::default(),
            teaching: TeachingConfig::default(),
            seed: 0,
            bootstrap_resamples: 2000,
            metric: RegretMetric::Expected,
            log_dir: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.modes.is_empty() {
            errs.push("modes must not be empty".to_string());
        }
        if self.domains.is_empty() {
            errs.push("domains must not be empty".to_string());
        }
        if self.learners_per_cell == 0 {
            errs.push("learners_per_cell must be positive".to_string());
        }
        if self.profiles.is_empty() {
            errs.push("profiles must not be empty".to_string());
        }
        if !(self.learner.temperature >= 0.0) {
            errs.push("learner temperature must be nonnegative".to_string());
        }
        if self.learner.counterfactual_samples == 0 || self.learner.answer_samples == 0 {
            errs.push("learner belief sample counts must be positive".to_string());
        }
        if let Err(Error::InvalidConfig(mut e)) = self.teaching.validate() {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

/// Percentile bootstrap interval (95%) for the mean of `xs`.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, seed: u64) -> Interval {
    if xs.is_empty() {
        return Interval { lo: 0.0, hi: 0.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    Interval { lo: at(0.025), hi: at(0.975) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub domain: String,
    pub mode: Mode,
    pub n: usize,
    /// Mean of the configured metric, with its bootstrap interval.
    pub mean_regret: f64,
    pub ci: Interval,
    pub mean_sampled_regret: f64,
    pub mean_expected_regret: f64,
    pub median_interactions: f64,
    pub by_difficulty: BTreeMap<Difficulty, f64>,
    pub errors: usize,
}

/// Paired difference `a - b` of mean regret over learners with equal seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n: usize,
    pub mean_diff: f64,
    pub ci: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema: String,
    pub config: StudyConfig,
    pub cells: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
    pub sessions: Vec<SessionResult>,
}

impl StudyReport {
    pub fn cell(&self, domain: &str, mode: Mode) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.domain == domain && c.mode == mode)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }

    /// Tab-separated summary, one row per cell then one per comparison.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("domain\tmode\tn\tmean_regret\tci_lo\tci_hi\tmedian_interactions\tlow\tmedium\thigh\terrors\n");
        for c in &self.cells {
            let d = |k| c.by_difficulty.get(&k).copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
                c.domain,
                c.mode,
                c.n,
                c.mean_regret,
                c.ci.lo,
                c.ci.hi,
                c.median_interactions,
                d(Difficulty::Low),
                d(Difficulty::Medium),
                d(Difficulty::High),
                c.errors
            );
        }
        s.push_str("\ncomparison\tn\tmean_diff\tci_lo\tci_hi\n");
        for c in &self.comparisons {
            let _ = writeln!(s, "{} - {}\t{}\t{:.4}\t{:.4}\t{:.4}", c.a, c.b, c.n, c.mean_diff, c.ci.lo, c.ci.hi);
        }
        s
    }
}

fn cell_key(domain: &str, mode: Mode) -> String {
    format!("{domain}/{mode}")
}

/// Runs every (domain, mode, learner) session in parallel and aggregates in
/// a fixed order, so the report depends only on the configuration.
pub fn run_study(domains: &BTreeMap<String, Domain>, cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let mut prepared = Vec::new();
    for name in &cfg.domains {
        let d = domains.get(name).ok_or_else(|| Error::InvalidConfig(vec![format!("unknown domain {name}")]))?;
        prepared.push((Curriculum::new(d)?, HeldOut::new(d)?, d.prior.clone()));
    }
    let jobs: Vec<(usize, Mode, usize)> = (0..prepared.len())
        .flat_map(|d| cfg.modes.iter().flat_map(move |&m| (0..cfg.learners_per_cell).map(move |i| (d, m, i))))
        .collect();
    let sessions = jobs
        .par_iter()
        .map(|&(d, mode, i)| {
            let (cur, heldout, prior) = &prepared[d];
            let seed = cfg.seed.wrapping_add(i as u64);
            let profile = cfg.profiles[i % cfg.profiles.len()];
            let mut learner = SimulatedLearner::new(prior, profile, cfg.learner.clone(), seed)?;
            let teaching = TeachingConfig {
                mode,
                budget: cfg.budgets.get(&cur.domain).copied().or(cfg.teaching.budget),
                seed,
                ..cfg.teaching.clone()
            };
            let s = run_session(cur, heldout, teaching, &mut learner)?;
            if let Some(dir) = &cfg.log_dir {
                write_session_log(dir, &s)?;
            }
            Ok(s.result)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_cell: BTreeMap<String, Vec<&SessionResult>> = BTreeMap::new();
    for s in &sessions {
        by_cell.entry(cell_key(&s.domain, s.mode)).or_default().push(s);
    }
    let mut cells = Vec::new();
    for (cur, _, _) in &prepared {
        for &mode in &cfg.modes {
            let rs = &by_cell[&cell_key(&cur.domain, mode)];
            let xs: Vec<f64> = rs.iter().map(|r| r.regret_by(cfg.metric)).collect();
            let mut inter: Vec<usize> = rs.iter().map(|r| r.interactions).collect();
            inter.sort_unstable();
            let median = if inter.len() % 2 == 1 {
                inter[inter.len() / 2] as f64
            } else {
                (inter[inter.len() / 2 - 1] + inter[inter.len() / 2]) as f64 / 2.0
            };
            let mut by_difficulty = BTreeMap::new();
            for d in [Difficulty::Low, Difficulty::Medium, Difficulty::High] {
                let v: Vec<f64> = rs
                    .iter()
                    .flat_map(|r| r.tests.iter())
                    .filter(|t| t.difficulty == d)
                    .map(|t| match cfg.metric {
                        RegretMetric::Sampled => t.regret,
                        RegretMetric::Expected => t.expected_regret,
                    })
                    .collect();
                if !v.is_empty() {
                    by_difficulty.insert(d, mean(v.into_iter()));
                }
            }
            cells.push(CellSummary {
                domain: cur.domain.clone(),
                mode,
                n: rs.len(),
                mean_regret: mean(xs.iter().copied()),
                ci: bootstrap_mean_ci(&xs, cfg.bootstrap_resamples, cfg.seed ^ 0xb007),
                mean_sampled_regret: mean(rs.iter().map(|r| r.mean_regret)),
                mean_expected_regret: mean(rs.iter().map(|r| r.mean_expected_regret)),
                median_interactions: median,
                by_difficulty,
                errors: rs.iter().filter(|r| r.error.is_some()).count(),
            });
        }
    }

    let paired = |ka: &str, kb: &str| -> Option<Comparison> {
        let a = by_cell.get(ka)?;
        let b = by_cell.get(kb)?;
        let bs: BTreeMap<u64, f64> = b.iter().map(|r| (r.seed, r.regret_by(cfg.metric))).collect();
        let diffs: Vec<f64> = a.iter().filter_map(|r| bs.get(&r.seed).map(|v| r.regret_by(cfg.metric) - v)).collect();
        Some(Comparison {
            a: ka.into(),
            b: kb.into(),
            n: diffs.len(),
            mean_diff: mean(diffs.iter().copied()),
            ci: bootstrap_mean_ci(&diffs, cfg.bootstrap_resamples, cfg.seed ^ 0xd1ff),
        })
    };
    let mut comparisons = Vec::new();
    for (cur, _, _) in &prepared {
        for (a, b) in [(Mode::Full, Mode::Open), (Mode::Full, Mode::Partial), (Mode::Partial, Mode::Open)] {
            comparisons.extend(paired(&cell_key(&cur.domain, a), &cell_key(&cur.domain, b)));
        }
    }
    if prepared.len() >= 2 {
        for &mode in &cfg.modes {
            for i in 0..prepared.len() {
                for j in i + 1..prepared.len() {
                    comparisons.extend(paired(
                        &cell_key(&prepared[i].0.domain, mode),
                        &cell_key(&prepared[j].0.domain, mode),
                    ));
                }
            }
        }
    }
    Ok(StudyReport { schema: STUDY_SCHEMA.into(), config: cfg.clone(), cells, comparisons, sessions })
}

/// A session's log as stored: configuration plus the learner's inputs,
/// enough to rebuild the controller state by replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub schema: String,
    pub domain: String,
    pub config: TeachingConfig,
    pub inputs: Vec<Incoming>,
    pub history: Vec<InteractionEvent>,
}

fn write_session_log(dir: &std::path::Path, s: &Session) -> Result<()> {
    let io = |e: std::io::Error| Error::Io { path: dir.display().to_string(), source: e };
    std::fs::create_dir_all(dir).map_err(io)?;
    let r = &s.result;
    let path = dir.join(format!("{}-{}-{}.json", r.domain, r.mode, r.seed));
    let log = SessionLog {
        schema: crate::teaching::SESSION_SCHEMA.into(),
        domain: r.domain.clone(),
        config: s.state.config.clone(),
        inputs: s.inputs.clone(),
        history: s.state.history.clone(),
    };
    let text = serde_json::to_string_pretty(&log).expect("session logs serialize");
    std::fs::write(&path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

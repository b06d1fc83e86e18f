//! Request and response bodies. Every body carries `schema_version`;
//! unknown fields are ignored.

use serde::{Deserialize, Serialize};
use teachloop::mdp::{Action, Coord, EnvFile, GridEnvironment, State, Trajectory};
use teachloop::teaching::{Awaiting, Curriculum, EventKind, InteractionEvent, TeachingState, TestSpec};

pub const API_SCHEMA: &str = "api/v1";

fn schema() -> String {
    API_SCHEMA.into()
}

/// A trajectory as positions plus action names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTrajectory {
    pub start: State,
    pub path: Vec<Coord>,
    pub actions: Vec<Action>,
}

impl From<&Trajectory> for WireTrajectory {
    fn from(t: &Trajectory) -> Self {
        Self { start: t.start, path: t.path(), actions: t.actions() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Demonstration,
    RemedialDemonstration,
    Feedback,
    DiagnosticTest,
    RemedialTest,
    LikertPrompt,
    Done,
}

impl From<EventKind> for PayloadKind {
    fn from(k: EventKind) -> Self {
        match k {
            EventKind::Demonstration => PayloadKind::Demonstration,
            EventKind::RemedialDemonstration => PayloadKind::RemedialDemonstration,
            EventKind::Feedback => PayloadKind::Feedback,
            EventKind::DiagnosticTest => PayloadKind::DiagnosticTest,
            EventKind::RemedialTest => PayloadKind::RemedialTest,
            EventKind::LikertPrompt => PayloadKind::LikertPrompt,
        }
    }
}

/// One interaction as the client sees it. Test payloads never include the
/// correct answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default = "schema")]
    pub schema_version: String,
    #[serde(rename = "type")]
    pub kind: PayloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<State>,
    /// The demonstration, or the correct answer in feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<WireTrajectory>,
    /// The learner's own answer, in feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<WireTrajectory>,
    /// Demonstrations and tests so far, and the session's budget.
    pub interactions: usize,
    pub budget: usize,
}

fn env_file(cur: &Curriculum, id: &str) -> Option<EnvFile> {
    cur.candidate(id).map(|c| GridEnvironment::to_file(&c.spec.env))
}

impl Payload {
    fn base(kind: PayloadKind, st: &TeachingState) -> Self {
        Self {
            schema_version: schema(),
            kind,
            event: None,
            env: None,
            start: None,
            trajectory: None,
            response: None,
            interactions: st.interactions,
            budget: st.budget,
        }
    }

    pub fn event(cur: &Curriculum, st: &TeachingState, ev: &InteractionEvent) -> Self {
        Self {
            event: Some(ev.index),
            env: env_file(cur, &ev.env_id),
            start: Some(ev.start),
            trajectory: ev.trajectory.as_ref().map(Into::into),
            response: ev.response.as_ref().map(Into::into),
            ..Self::base(ev.kind.into(), st)
        }
    }

    pub fn test(st: &TeachingState, t: &TestSpec, event: usize) -> Self {
        Self {
            event: Some(event),
            env: Some(t.env.to_file()),
            start: Some(t.start),
            ..Self::base(t.kind.into(), st)
        }
    }

    /// What the session is waiting on.
    pub fn pending(cur: &Curriculum, st: &TeachingState) -> Self {
        match &st.awaiting {
            Awaiting::Ack { event } => Self::event(cur, st, &st.history[*event]),
            Awaiting::Response { test, event } => Self::test(st, test, *event),
            Awaiting::Start | Awaiting::Done => Self::base(PayloadKind::Done, st),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct CreateRequest {
    #[serde(default)]
    pub schema_version: Option<String>,
    pub condition: String,
    pub domain: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Intro {
    pub domain: String,
    /// Reward features the learner is told about; never their weights.
    pub feature_names: Vec<String>,
    pub budget: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub schema_version: String,
    pub session_id: String,
    pub condition: String,
    pub intro: Intro,
    pub first: Payload,
}

/// An answer's actions, optionally with the positions the client drew;
/// the server replays the actions and checks the positions agree.
#[derive(Clone, Debug, Deserialize)]
pub struct AnswerTrajectory {
    pub actions: Vec<Action>,
    #[serde(default)]
    pub path: Option<Vec<Coord>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResponseRequest {
    /// The learner has watched a demonstration or feedback.
    Ack {
        #[serde(default)]
        event: Option<usize>,
        #[serde(default)]
        likert: Option<u8>,
    },
    Answer {
        #[serde(default)]
        event: Option<usize>,
        trajectory: AnswerTrajectory,
        #[serde(default)]
        likert: Option<u8>,
    },
}

#[derive(Clone, Debug, Deserialize)]
pub struct ResponseEnvelope {
    #[serde(default)]
    pub schema_version: Option<String>,
    #[serde(flatten)]
    pub body: ResponseRequest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseResult {
    pub schema_version: String,
    pub event: usize,
    /// Set for answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Shown after a wrong answer when the condition gives feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Payload>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikertResponse {
    pub event: usize,
    pub value: u8,
    pub at_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainInfo {
    pub name: String,
    pub feature_names: Vec<String>,
    pub budget: usize,
    pub lessons: usize,
    pub teaching_environments: usize,
    pub conditions: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainsResponse {
    pub schema_version: String,
    pub domains: Vec<DomainInfo>,
}

pub fn envelope_schema_ok(v: &Option<String>) -> bool {
    v.as_deref().is_none_or(|s| s == API_SCHEMA)
}

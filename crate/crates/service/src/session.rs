use serde::{Deserialize, Serialize};
use teachloop::beliefs::FilterSnapshot;
use teachloop::teaching::{step, Awaiting, Curriculum, Incoming, Mode, Outcome, TeachingConfig, TeachingState, SESSION_SCHEMA};

use crate::store::{LogWriter, Record};
use crate::wire::LikertResponse;
use crate::ApiError;

/// A live session. Every change is written to its log before it is
/// applied here, so the log always replays to this state.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub domain: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub config: TeachingConfig,
    pub state: TeachingState,
    pub inputs: Vec<Incoming>,
    /// Test event already handed out and not yet answered.
    pub delivered: Option<usize>,
    pub likert: Vec<LikertResponse>,
    /// Teacher filter before any input, then after each input.
    pub snapshots: Vec<FilterSnapshot>,
    writer: Option<LogWriter>,
}

/// `session/v1` export: everything needed to replay the session, plus the
/// state and filter snapshots it should replay to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub schema: String,
    pub session_id: String,
    pub domain: String,
    pub condition: Mode,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub config: TeachingConfig,
    pub inputs: Vec<Incoming>,
    pub likert: Vec<LikertResponse>,
    pub state: TeachingState,
    /// `pf/v1`; `event_index` counts the events issued so far.
    pub snapshots: Vec<FilterSnapshot>,
}

fn snapshot(st: &TeachingState) -> FilterSnapshot {
    FilterSnapshot::capture(&st.filter, &st.config.filter, st.history.len())
}

fn pending_event(st: &TeachingState) -> Option<usize> {
    match &st.awaiting {
        Awaiting::Ack { event } | Awaiting::Response { event, .. } => Some(*event),
        _ => None,
    }
}

impl Session {
    /// Opens a session and issues its first interaction.
    pub fn create(
        cur: &Curriculum,
        id: String,
        config: TeachingConfig,
        now: u64,
        writer: Option<LogWriter>,
    ) -> Result<(Self, Outcome), ApiError> {
        let state = TeachingState::new(cur, config.clone())?;
        let mut s = Self {
            id,
            domain: cur.domain.clone(),
            created_ms: now,
            updated_ms: now,
            snapshots: vec![snapshot(&state)],
            config,
            state,
            inputs: Vec::new(),
            delivered: None,
            likert: Vec::new(),
            writer,
        };
        // nothing reaches disk unless the first step succeeds
        let (st, out) = step(cur, &s.state, &Incoming::Start)?;
        s.write(&Record::Create {
            schema: SESSION_SCHEMA.into(),
            session_id: s.id.clone(),
            domain: s.domain.clone(),
            config: s.config.clone(),
            at_ms: now,
        })?;
        s.write(&Record::Input { input: Incoming::Start, likert: None, at_ms: now })?;
        s.commit(st, Incoming::Start, None, None, now);
        Ok((s, out))
    }

    fn write(&mut self, r: &Record) -> Result<(), ApiError> {
        match &mut self.writer {
            Some(w) => w.append(r).map_err(|e| ApiError::internal(format!("{}: {e}", w.path().display()))),
            None => Ok(()),
        }
    }

    /// Feeds one learner input through the controller. Nothing changes if
    /// the controller rejects it or the log cannot be written.
    pub fn apply(&mut self, cur: &Curriculum, input: Incoming, likert: Option<u8>, now: u64) -> Result<Outcome, ApiError> {
        let event = pending_event(&self.state);
        let (st, out) = step(cur, &self.state, &input)?;
        self.write(&Record::Input { input: input.clone(), likert, at_ms: now })?;
        self.commit(st, input, likert, event, now);
        Ok(out)
    }

    fn commit(&mut self, st: TeachingState, input: Incoming, likert: Option<u8>, event: Option<usize>, now: u64) {
        if let (Some(value), Some(event)) = (likert, event) {
            self.likert.push(LikertResponse { event, value, at_ms: now });
        }
        self.state = st;
        self.snapshots.push(snapshot(&self.state));
        self.inputs.push(input);
        self.delivered = None;
        self.updated_ms = now;
    }

    pub fn mark_delivered(&mut self, event: usize, now: u64) -> Result<(), ApiError> {
        self.write(&Record::Delivered { event, at_ms: now })?;
        self.delivered = Some(event);
        self.updated_ms = now;
        Ok(())
    }

    /// Rebuilds a session from its log records.
    pub fn from_records(cur: &Curriculum, records: &[Record], writer: Option<LogWriter>) -> Result<Self, String> {
        let Some(Record::Create { session_id, domain, config, at_ms, .. }) = records.first() else {
            return Err("log does not start with a create record".into());
        };
        if *domain != cur.domain {
            return Err(format!("log is for domain {domain}, not {}", cur.domain));
        }
        let state = TeachingState::new(cur, config.clone()).map_err(|e| e.to_string())?;
        let mut s = Self {
            id: session_id.clone(),
            domain: domain.clone(),
            created_ms: *at_ms,
            updated_ms: *at_ms,
            snapshots: vec![snapshot(&state)],
            config: config.clone(),
            state,
            inputs: Vec::new(),
            delivered: None,
            likert: Vec::new(),
            writer: None,
        };
        for (k, r) in records.iter().enumerate().skip(1) {
            match r {
                Record::Input { input, likert, at_ms } => {
                    let event = pending_event(&s.state);
                    let (st, _) = step(cur, &s.state, input).map_err(|e| format!("record {k}: {e}"))?;
                    s.commit(st, input.clone(), *likert, event, *at_ms);
                }
                Record::Delivered { event, at_ms } => {
                    s.delivered = Some(*event);
                    s.updated_ms = *at_ms;
                }
                Record::Create { .. } => return Err(format!("record {k}: second create record")),
            }
        }
        s.writer = writer;
        Ok(s)
    }

    pub fn export(&self) -> Export {
        Export {
            schema: SESSION_SCHEMA.into(),
            session_id: self.id.clone(),
            domain: self.domain.clone(),
            condition: self.config.mode,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            likert: self.likert.clone(),
            state: self.state.clone(),
            snapshots: self.snapshots.clone(),
        }
    }
}

//! Operator commands, device markers and system events, serialized through
//! one task that owns `events.csv` and the active-block state.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use engage_core::recording::{CsvStream, EventKind, EventRow, EventSource, RecordingError};
use engage_core::session::{ConditionLabel, SegmentLabel};
use engage_core::sync::ReferenceClock;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::live::LiveHub;
use crate::recorder::Failure;

/// Inbound operator command, as sent over `/live`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    MarkEvent {
        label: String,
        #[serde(default)]
        participant: Option<String>,
        #[serde(default)]
        id: Option<String>,
    },
    StartBlock {
        label: String,
        #[serde(default)]
        participant: Option<String>,
        #[serde(default)]
        id: Option<String>,
    },
    StopBlock {
        #[serde(default)]
        participant: Option<String>,
        #[serde(default)]
        id: Option<String>,
    },
}

impl Command {
    pub fn id(&self) -> Option<&str> {
        match self {
            Command::MarkEvent { id, .. } | Command::StartBlock { id, .. } | Command::StopBlock { id, .. } => id.as_deref(),
        }
    }
}

/// Reply to a [`Command`]. Exactly one of `event` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(rename = "type")]
    pub kind: AckType,
    pub id: Option<String>,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<EventRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckType {
    Ack,
}

impl Ack {
    pub fn accepted(id: Option<String>, event: EventRow) -> Self {
        Self { kind: AckType::Ack, id, ok: true, event: Some(event), error: None }
    }

    pub fn rejected(id: Option<String>, error: impl Into<String>) -> Self {
        Self { kind: AckType::Ack, id, ok: false, event: None, error: Some(error.into()) }
    }
}

pub(crate) enum ControlMsg {
    Command { command: Command, reply: oneshot::Sender<Ack> },
    /// A `/engage/marker` message, already on the reference clock.
    Marker { participant: String, device_ts: Option<f64>, t_ref: f64, kind: String, label: String },
    /// Gap or reconnect of a stream, stamped on arrival.
    System { participant: String, kind: EventKind, label: String },
    /// Sent once the intake tasks have finished, so nothing queued is lost.
    Stop,
}

/// Cloneable handle for submitting commands.
#[derive(Clone)]
pub struct CommandSender(pub(crate) mpsc::Sender<ControlMsg>);

impl CommandSender {
    pub async fn send(&self, command: Command) -> Ack {
        let id = command.id().map(str::to_string);
        let (reply, rx) = oneshot::channel();
        if self.0.send(ControlMsg::Command { command, reply }).await.is_err() {
            return Ack::rejected(id, "session is not recording");
        }
        rx.await.unwrap_or_else(|_| Ack::rejected(id, "session is not recording"))
    }
}

pub(crate) struct Controller {
    clock: Arc<dyn ReferenceClock>,
    events: CsvStream<EventRow>,
    plans: HashMap<String, Vec<ConditionLabel>>,
    session_plan: Vec<ConditionLabel>,
    /// Participant (empty for all) to active label.
    active: BTreeMap<String, String>,
    hub: Arc<LiveHub>,
    failure: Failure,
}

impl Controller {
    pub fn new(
        clock: Arc<dyn ReferenceClock>,
        events: CsvStream<EventRow>,
        plans: HashMap<String, Vec<ConditionLabel>>,
        session_plan: Vec<ConditionLabel>,
        hub: Arc<LiveHub>,
        failure: Failure,
    ) -> Self {
        Self { clock, events, plans, session_plan, active: BTreeMap::new(), hub, failure }
    }

    /// Runs until every sender is gone; returns the number of event rows.
    pub async fn run(mut self, mut rx: mpsc::Receiver<ControlMsg>) -> Result<u64, RecordingError> {
        while let Some(msg) = rx.recv().await {
            match msg {
                ControlMsg::Command { command, reply } => {
                    let id = command.id().map(str::to_string);
                    let ack = match self.command(command) {
                        Ok(row) => match self.record(row) {
                            Ok(row) => Ack::accepted(id, row),
                            Err(e) => {
                                let _ = reply.send(Ack::rejected(id, e.to_string()));
                                return Err(e);
                            }
                        },
                        Err(reason) => Ack::rejected(id, reason),
                    };
                    let _ = reply.send(ack);
                }
                ControlMsg::Marker { participant, device_ts, t_ref, kind, label } => {
                    match self.marker(participant, device_ts, t_ref, &kind, label) {
                        Ok(row) => {
                            self.record(row)?;
                        }
                        Err(reason) => tracing::warn!(%reason, "device marker rejected"),
                    }
                }
                ControlMsg::System { participant, kind, label } => {
                    let row = EventRow {
                        t_ref: self.clock.now(),
                        device_ts: None,
                        participant,
                        kind,
                        label,
                        source: EventSource::System,
                    };
                    self.record(row)?;
                }
                ControlMsg::Stop => break,
            }
        }
        self.events.flush()?;
        Ok(self.events.rows())
    }

    fn record(&mut self, row: EventRow) -> Result<EventRow, RecordingError> {
        let written = self.events.append(&row).and_then(|_| self.events.flush());
        if let Err(e) = &written {
            self.failure.raise(format!("{}: {e}", self.events.path().display()));
        }
        written?;
        self.hub.set_active(self.active.clone());
        Ok(row)
    }

    fn command(&mut self, command: Command) -> Result<EventRow, String> {
        let t_ref = self.clock.now();
        let (kind, participant, label) = match command {
            Command::MarkEvent { label, participant, .. } => (EventKind::Mark, participant, label),
            Command::StartBlock { label, participant, .. } => (EventKind::StartBlock, participant, label),
            Command::StopBlock { participant, .. } => (EventKind::StopBlock, participant, String::new()),
        };
        let participant = participant.unwrap_or_default();
        let label = self.transition(kind, &participant, label)?;
        Ok(EventRow { t_ref, device_ts: None, participant, kind, label, source: EventSource::Operator })
    }

    fn marker(
        &mut self,
        participant: String,
        device_ts: Option<f64>,
        t_ref: f64,
        kind: &str,
        label: String,
    ) -> Result<EventRow, String> {
        let kind = match kind {
            "start_block" => EventKind::StartBlock,
            "stop_block" => EventKind::StopBlock,
            "mark" => EventKind::Mark,
            other => return Err(format!("unknown marker kind {other:?}")),
        };
        let label = self.transition(kind, &participant, label)?;
        Ok(EventRow { t_ref, device_ts, participant, kind, label, source: EventSource::Osc })
    }

    /// Apply the block rules and return the label to record. Starting while a
    /// block is active for the same participant (or for everyone) is refused,
    /// as is stopping when nothing is active.
    fn transition(&mut self, kind: EventKind, participant: &str, label: String) -> Result<String, String> {
        if !participant.is_empty() && !self.plans.contains_key(participant) {
            return Err(format!("unknown participant {participant:?}"));
        }
        let who = if participant.is_empty() { "the session".to_string() } else { participant.to_string() };
        match kind {
            EventKind::Mark => {
                if label.trim().is_empty() {
                    return Err("mark_event needs a label".into());
                }
                Ok(label)
            }
            EventKind::StartBlock => {
                let parsed: SegmentLabel = label.parse().map_err(|e| format!("{label:?}: {e}"))?;
                if let Some(c) = parsed.condition() {
                    let plan = if participant.is_empty() { &self.session_plan } else { &self.plans[participant] };
                    if !plan.contains(&c) {
                        return Err(format!("{c} is not in the condition plan of {who}"));
                    }
                }
                let clash = if participant.is_empty() {
                    self.active.iter().next()
                } else {
                    self.active.get_key_value(participant).or_else(|| self.active.get_key_value(""))
                };
                if let Some((p, l)) = clash {
                    let owner = if p.is_empty() { "the session" } else { p.as_str() };
                    return Err(format!("block {l} is already active for {owner}"));
                }
                let label = parsed.to_string();
                self.active.insert(participant.to_string(), label.clone());
                Ok(label)
            }
            EventKind::StopBlock => {
                let active = self.active.remove(participant).ok_or_else(|| format!("no active block for {who}"))?;
                if !label.is_empty() && label != active {
                    self.active.insert(participant.to_string(), active.clone());
                    return Err(format!("stop for {label} while {active} is active for {who}"));
                }
                Ok(active)
            }
            EventKind::Gap | EventKind::Reconnect => Ok(label),
        }
    }
}

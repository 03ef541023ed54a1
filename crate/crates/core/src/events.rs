//! Session event log and its replay.
//!
//! Every state change of a session is one [`Event`]. Replaying a log with
//! [`replay`] rebuilds the observable state of the session and checks the
//! lifecycle rules on the way.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{SessionId, TrialId};
use crate::space::Assignment;
use crate::tuners::TerminationReason;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    Running,
    Stopped,
    Dead,
    Finished,
}

impl TrialState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialState::Running => "running",
            TrialState::Stopped => "stopped",
            TrialState::Dead => "dead",
            TrialState::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Queued,
    Running,
    Terminated,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Queued => "queued",
            SessionStatus::Running => "running",
            SessionStatus::Terminated => "terminated",
        }
    }
}

impl std::str::FromStr for SessionStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "queued" => Ok(SessionStatus::Queued),
            "running" => Ok(SessionStatus::Running),
            "terminated" => Ok(SessionStatus::Terminated),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Why a running trial left the live pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitCause {
    Tuner,
    Shrink,
    Terminated,
}

/// Where an exited trial went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPool {
    Stop,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantCause {
    Grow,
    Shrink,
    Release,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    SessionStarted {
        tuner: String,
    },
    TrialCreated {
        trial: TrialId,
        assignment: Assignment,
    },
    EpochCompleted {
        trial: TrialId,
        epoch: u32,
        metric: f64,
    },
    TrialExploited {
        trial: TrialId,
        source: TrialId,
        epoch: u32,
        assignment: Assignment,
    },
    TrialExited {
        trial: TrialId,
        epoch: u32,
        cause: ExitCause,
        pool: ExitPool,
    },
    TrialRevived {
        trial: TrialId,
        epoch: u32,
    },
    TrialFinished {
        trial: TrialId,
        epoch: u32,
    },
    GrantChanged {
        from: u32,
        to: u32,
        cause: GrantCause,
    },
    SessionTerminated {
        reason: TerminationReason,
    },
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub time: u64,
    pub session: SessionId,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub trial: TrialId,
    pub source: TrialId,
    pub epoch: u32,
}

/// Externally visible state of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTrial {
    pub id: TrialId,
    pub assignment: Assignment,
    pub state: TrialState,
    pub epochs_done: u32,
    pub last_metric: Option<f64>,
    /// `(epoch, metric)` pairs; cleared when the trial is discarded.
    pub history: Vec<(u32, f64)>,
    /// Most recent exploit source.
    pub lineage: Option<TrialId>,
}

/// Live/stop/dead/finished partition of a session's trials.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPools {
    pub live: Vec<TrialId>,
    pub stop_pool: Vec<TrialId>,
    pub dead_pool: Vec<TrialId>,
    pub finished: Vec<TrialId>,
}

/// Session state as reconstructed from its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSession {
    pub id: SessionId,
    pub status: SessionStatus,
    pub reason: Option<TerminationReason>,
    pub grant: u32,
    pub trials_created: u64,
    pub trials: BTreeMap<TrialId, ObservedTrial>,
    pub lineage: Vec<LineageEdge>,
    pub started_at: Option<u64>,
    pub terminated_at: Option<u64>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("event for session {got} in the log of {expected}")]
    WrongSession { expected: SessionId, got: SessionId },
    #[error("sequence gap: expected {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("event after termination (seq {0})")]
    AfterTermination(u64),
    #[error("unknown trial {trial} at seq {seq}")]
    UnknownTrial { trial: TrialId, seq: u64 },
    #[error("trial {trial} created twice at seq {seq}")]
    Duplicate { trial: TrialId, seq: u64 },
    #[error("illegal transition of {trial} from {from:?} at seq {seq}")]
    Transition {
        trial: TrialId,
        from: TrialState,
        seq: u64,
    },
    #[error("epoch {epoch} of {trial} does not follow {previous} at seq {seq}")]
    Epoch {
        trial: TrialId,
        epoch: u32,
        previous: u32,
        seq: u64,
    },
    #[error("{live} live trials exceed grant {grant} at seq {seq}")]
    GrantExceeded { live: usize, grant: u32, seq: u64 },
}

impl ObservedSession {
    pub fn new(id: SessionId) -> Self {
        ObservedSession {
            id,
            status: SessionStatus::Queued,
            reason: None,
            grant: 0,
            trials_created: 0,
            trials: BTreeMap::new(),
            lineage: Vec::new(),
            started_at: None,
            terminated_at: None,
            last_seq: 0,
        }
    }

    pub fn live_count(&self) -> usize {
        self.trials
            .values()
            .filter(|t| t.state == TrialState::Running)
            .count()
    }

    pub fn pools(&self) -> SessionPools {
        let mut pools = SessionPools::default();
        for t in self.trials.values() {
            match t.state {
                TrialState::Running => pools.live.push(t.id),
                TrialState::Stopped => pools.stop_pool.push(t.id),
                TrialState::Dead => pools.dead_pool.push(t.id),
                TrialState::Finished => pools.finished.push(t.id),
            }
        }
        pools
    }

    fn trial_mut(&mut self, trial: TrialId, seq: u64) -> Result<&mut ObservedTrial, ReplayError> {
        self.trials
            .get_mut(&trial)
            .ok_or(ReplayError::UnknownTrial { trial, seq })
    }

    fn running(&mut self, trial: TrialId, seq: u64) -> Result<&mut ObservedTrial, ReplayError> {
        let t = self.trial_mut(trial, seq)?;
        if t.state != TrialState::Running {
            return Err(ReplayError::Transition {
                trial,
                from: t.state,
                seq,
            });
        }
        Ok(t)
    }

    /// Apply one event, enforcing sequence and lifecycle rules.
    pub fn apply(&mut self, e: &Event) -> Result<(), ReplayError> {
        if e.session != self.id {
            return Err(ReplayError::WrongSession {
                expected: self.id,
                got: e.session,
            });
        }
        if e.seq != self.last_seq + 1 {
            return Err(ReplayError::Gap {
                expected: self.last_seq + 1,
                got: e.seq,
            });
        }
        if self.status == SessionStatus::Terminated {
            return Err(ReplayError::AfterTermination(e.seq));
        }
        let seq = e.seq;
        match &e.body {
            EventBody::SessionStarted { .. } => {
                self.status = SessionStatus::Running;
                self.started_at = Some(e.time);
            }
            EventBody::TrialCreated { trial, assignment } => {
                if self.trials.contains_key(trial) {
                    return Err(ReplayError::Duplicate { trial: *trial, seq });
                }
                self.trials_created += 1;
                self.trials.insert(
                    *trial,
                    ObservedTrial {
                        id: *trial,
                        assignment: assignment.clone(),
                        state: TrialState::Running,
                        epochs_done: 0,
                        last_metric: None,
                        history: Vec::new(),
                        lineage: None,
                    },
                );
            }
            EventBody::EpochCompleted {
                trial,
                epoch,
                metric,
            } => {
                let t = self.running(*trial, seq)?;
                if *epoch != t.epochs_done + 1 {
                    return Err(ReplayError::Epoch {
                        trial: *trial,
                        epoch: *epoch,
                        previous: t.epochs_done,
                        seq,
                    });
                }
                t.epochs_done = *epoch;
                t.last_metric = Some(*metric);
                t.history.push((*epoch, *metric));
            }
            EventBody::TrialExploited {
                trial,
                source,
                epoch,
                assignment,
            } => {
                let t = self.running(*trial, seq)?;
                t.assignment = assignment.clone();
                t.lineage = Some(*source);
                self.lineage.push(LineageEdge {
                    trial: *trial,
                    source: *source,
                    epoch: *epoch,
                });
            }
            EventBody::TrialExited { trial, pool, .. } => {
                let t = self.running(*trial, seq)?;
                match pool {
                    ExitPool::Stop => t.state = TrialState::Stopped,
                    ExitPool::Dead => {
                        t.state = TrialState::Dead;
                        t.history.clear();
                    }
                }
            }
            EventBody::TrialRevived { trial, .. } => {
                let t = self.trial_mut(*trial, seq)?;
                if t.state != TrialState::Stopped {
                    return Err(ReplayError::Transition {
                        trial: *trial,
                        from: t.state,
                        seq,
                    });
                }
                t.state = TrialState::Running;
            }
            EventBody::TrialFinished { trial, .. } => {
                self.running(*trial, seq)?.state = TrialState::Finished;
            }
            EventBody::GrantChanged { to, .. } => self.grant = *to,
            EventBody::SessionTerminated { reason } => {
                self.status = SessionStatus::Terminated;
                self.reason = Some(*reason);
                self.terminated_at = Some(e.time);
            }
        }
        self.last_seq = seq;
        let live = self.live_count();
        if live > self.grant as usize {
            return Err(ReplayError::GrantExceeded {
                live,
                grant: self.grant,
                seq,
            });
        }
        Ok(())
    }
}

/// Rebuild a session from its log.
pub fn replay<'a>(
    id: SessionId,
    events: impl IntoIterator<Item = &'a Event>,
) -> Result<ObservedSession, ReplayError> {
    let mut s = ObservedSession::new(id);
    for e in events {
        s.apply(e)?;
    }
    Ok(s)
}

//! One optimization session: trials, pools, tuner decisions, and the
//! shrink/grow commands that implement Stop-and-Go.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::events::{
    Event, EventBody, ExitCause, ExitPool, GrantCause, LineageEdge, ObservedSession,
    ObservedTrial, SessionPools, SessionStatus, TrialState,
};
use crate::ids::{SessionId, TrialId};
use crate::simcluster::{WorkloadError, WorkloadSpec};
use crate::space::{Assignment, ChoptConfig, ConfigError, Order};
use crate::tuners::{
    check_termination, CheckpointView, Decision, PendingTrial, TerminationProbe,
    TerminationReason, TerminationStatus, TerminationTracker, TunerError, TunerState,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: TrialId,
    pub assignment: Assignment,
    pub state: TrialState,
    pub epochs_done: u32,
    pub history: Vec<(u32, f64)>,
    pub last_metric: Option<f64>,
    pub lineage: Option<TrialId>,
    pub max_epochs: u32,
}

/// Per-trial line of a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub id: TrialId,
    pub assignment: Assignment,
    pub state: TrialState,
    pub epochs_done: u32,
    pub last_metric: Option<f64>,
    pub lineage: Option<TrialId>,
}

/// Immutable view of a session between ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: SessionId,
    pub status: SessionStatus,
    pub reason: Option<TerminationReason>,
    pub measure: String,
    pub order: Order,
    pub grant: u32,
    pub trials_created: u64,
    pub pools: SessionPools,
    pub trials: Vec<TrialSummary>,
    pub best: Option<TrialSummary>,
    pub started_at: Option<u64>,
    pub terminated_at: Option<u64>,
}

impl SessionSnapshot {
    pub fn from_observed(obs: &ObservedSession, measure: &str, order: Order) -> Self {
        let trials: Vec<TrialSummary> = obs
            .trials
            .values()
            .map(|t| TrialSummary {
                id: t.id,
                assignment: t.assignment.clone(),
                state: t.state,
                epochs_done: t.epochs_done,
                last_metric: t.last_metric,
                lineage: t.lineage,
            })
            .collect();
        let best = top_k(&trials, order, 1).into_iter().next();
        SessionSnapshot {
            id: obs.id,
            status: obs.status,
            reason: obs.reason,
            measure: measure.to_string(),
            order,
            grant: obs.grant,
            trials_created: obs.trials_created,
            pools: obs.pools(),
            trials,
            best,
            started_at: obs.started_at,
            terminated_at: obs.terminated_at,
        }
    }
}

/// The `k` trials with the best last metric; trials without a metric are
/// skipped and ties go to the lower id.
pub fn top_k(trials: &[TrialSummary], order: Order, k: usize) -> Vec<TrialSummary> {
    let mut scored: Vec<&TrialSummary> = trials.iter().filter(|t| t.last_metric.is_some()).collect();
    scored.sort_by(|a, b| {
        order
            .best_first(a.last_metric.unwrap(), b.last_metric.unwrap())
            .then(a.id.cmp(&b.id))
    });
    scored.into_iter().take(k).cloned().collect()
}

/// What a session could use, reported to the master each tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionDemand {
    pub id: SessionId,
    pub grant: u32,
    /// Most GPUs the session could put to work; `None` when unbounded.
    pub cap: Option<u32>,
}

pub struct Session {
    id: SessionId,
    config: ChoptConfig,
    workload: WorkloadSpec,
    tuner: TunerState,
    status: SessionStatus,
    reason: Option<TerminationReason>,
    trials: BTreeMap<TrialId, Trial>,
    live: BTreeSet<TrialId>,
    stop_pool: BTreeSet<TrialId>,
    grant: u32,
    trials_created: u64,
    pending: VecDeque<PendingTrial>,
    rng: ChaCha8Rng,
    reports: BTreeMap<u32, Vec<(TrialId, f64)>>,
    tracker: TerminationTracker,
    best: Option<f64>,
    lineage: Vec<LineageEdge>,
    started_at: Option<u64>,
    terminated_at: Option<u64>,
    next_seq: u64,
    now: u64,
    out: Vec<Event>,
}

impl Session {
    /// Build a queued session. Without a `workload` key the session runs on
    /// a bowl centred in its space; without a `seed` it uses its id.
    pub fn new(id: SessionId, config: ChoptConfig) -> Result<Self, ConfigError> {
        let seed = config.seed.unwrap_or(u64::from(id.0));
        let workload = match &config.workload {
            Some(w) => w.clone(),
            None => {
                let mut w = WorkloadSpec::default_for(&config.space);
                if let WorkloadSpec::Bowl { seed: s, .. } = &mut w {
                    *s = seed;
                }
                w
            }
        };
        workload.validate_against(&config.space)?;
        let tuner = TunerState::new(&config);
        Ok(Session {
            id,
            workload,
            tuner,
            status: SessionStatus::Queued,
            reason: None,
            trials: BTreeMap::new(),
            live: BTreeSet::new(),
            stop_pool: BTreeSet::new(),
            grant: 0,
            trials_created: 0,
            pending: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            reports: BTreeMap::new(),
            tracker: TerminationTracker::default(),
            best: None,
            lineage: Vec::new(),
            started_at: None,
            terminated_at: None,
            next_seq: 1,
            now: 0,
            out: Vec::new(),
            config,
        })
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn config(&self) -> &ChoptConfig {
        &self.config
    }

    pub fn workload(&self) -> &WorkloadSpec {
        &self.workload
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn reason(&self) -> Option<TerminationReason> {
        self.reason
    }

    pub fn grant(&self) -> u32 {
        self.grant
    }

    pub fn trials_created(&self) -> u64 {
        self.trials_created
    }

    pub fn trial(&self, id: TrialId) -> Option<&Trial> {
        self.trials.get(&id)
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.trials.values()
    }

    pub fn live(&self) -> &BTreeSet<TrialId> {
        &self.live
    }

    pub fn stop_pool(&self) -> &BTreeSet<TrialId> {
        &self.stop_pool
    }

    fn emit(&mut self, body: EventBody) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.out.push(Event {
            seq,
            time: self.now,
            session: self.id,
            body,
        });
        self.observe_termination();
    }

    fn drain(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.out)
    }

    fn probe(&self) -> TerminationProbe {
        TerminationProbe {
            elapsed: self.now.saturating_sub(self.started_at.unwrap_or(self.now)),
            trials_created: self.trials_created,
            live: self.live.len(),
            best: self.best,
        }
    }

    fn observe_termination(&mut self) {
        if self.status == SessionStatus::Running {
            let probe = self.probe();
            self.tracker
                .observe(&self.config.termination, self.config.order, &probe, self.next_seq - 1);
        }
    }

    /// Move from the queue to running and draw the initial population.
    pub fn start(&mut self, now: u64) -> Vec<Event> {
        if self.status != SessionStatus::Queued {
            return Vec::new();
        }
        self.now = now;
        self.status = SessionStatus::Running;
        self.started_at = Some(now);
        let tuner = self.tuner.name().to_string();
        self.emit(EventBody::SessionStarted { tuner });
        let initial = self.tuner.init_population(&self.config, &mut self.rng);
        self.pending.extend(initial);
        self.drain()
    }

    fn can_create(&self) -> bool {
        self.config
            .termination
            .max_session_number
            .is_none_or(|max| self.trials_created < max)
    }

    fn create_next(&mut self) -> bool {
        if !self.can_create() {
            return false;
        }
        if self.pending.is_empty() {
            let more = self.tuner.replenish(&self.config.space, &mut self.rng);
            self.pending.extend(more);
        }
        let Some(p) = self.pending.pop_front() else {
            return false;
        };
        let id = TrialId(self.trials_created as u32 + 1);
        self.trials_created += 1;
        self.tuner.register(id, p.bracket);
        let max_epochs = self.tuner.max_epochs(self.workload.max_epochs());
        self.trials.insert(
            id,
            Trial {
                id,
                assignment: p.assignment.clone(),
                state: TrialState::Running,
                epochs_done: 0,
                history: Vec::new(),
                last_metric: None,
                lineage: None,
                max_epochs,
            },
        );
        self.live.insert(id);
        self.emit(EventBody::TrialCreated {
            trial: id,
            assignment: p.assignment,
        });
        true
    }

    /// Send a running trial to the stop pool with probability `stop_ratio`,
    /// otherwise discard it to the dead pool. Always consumes one draw.
    pub fn place_exited(&mut self, id: TrialId, cause: ExitCause) -> Option<ExitPool> {
        if !self.live.contains(&id) {
            return None;
        }
        let u: f64 = self.rng.random();
        let pool = if u < self.config.stop_ratio {
            ExitPool::Stop
        } else {
            ExitPool::Dead
        };
        self.exit_to(id, cause, pool);
        Some(pool)
    }

    fn exit_to(&mut self, id: TrialId, cause: ExitCause, pool: ExitPool) {
        self.live.remove(&id);
        let t = self.trials.get_mut(&id).expect("live trial exists");
        match pool {
            ExitPool::Stop => {
                t.state = TrialState::Stopped;
                self.stop_pool.insert(id);
            }
            ExitPool::Dead => {
                t.state = TrialState::Dead;
                t.history = Vec::new();
            }
        }
        let epoch = t.epochs_done;
        self.emit(EventBody::TrialExited {
            trial: id,
            epoch,
            cause,
            pool,
        });
    }

    /// Advance every live trial one epoch, apply checkpoint decisions,
    /// refill freed GPUs, and check termination.
    pub fn tick(&mut self, now: u64) -> Result<Vec<Event>, SessionError> {
        if self.status != SessionStatus::Running {
            return Ok(Vec::new());
        }
        self.now = now;
        self.observe_termination();

        let live: Vec<TrialId> = self.live.iter().copied().collect();
        for &id in &live {
            let t = self.trials.get_mut(&id).expect("live trial exists");
            t.epochs_done += 1;
            let epoch = t.epochs_done;
            let effective = self.config.space.effective(&t.assignment);
            let metric = self.workload.evaluate(&effective, epoch)?;
            t.history.push((epoch, metric));
            t.last_metric = Some(metric);
            if self.best.is_none_or(|b| self.config.order.is_better(metric, b)) {
                self.best = Some(metric);
            }
            self.emit(EventBody::EpochCompleted {
                trial: id,
                epoch,
                metric,
            });
        }

        let mut reporters = Vec::new();
        if self.config.step.early_stopping_enabled() {
            for &id in &live {
                let t = &self.trials[&id];
                if self.config.step.is_checkpoint(t.epochs_done) {
                    let metric = t.last_metric.expect("just evaluated");
                    self.reports
                        .entry(t.epochs_done)
                        .or_default()
                        .push((id, metric));
                    reporters.push(id);
                }
            }
        }

        for &id in &live {
            let t = self.trials.get_mut(&id).expect("live trial exists");
            if t.epochs_done >= t.max_epochs {
                t.state = TrialState::Finished;
                let epoch = t.epochs_done;
                self.live.remove(&id);
                self.emit(EventBody::TrialFinished { trial: id, epoch });
            }
        }

        let mut decisions = Vec::new();
        for id in reporters {
            if !self.live.contains(&id) {
                continue;
            }
            let t = &self.trials[&id];
            let step_index = t.epochs_done;
            let view = CheckpointView {
                trial: id,
                step_index,
                metric: t.last_metric.expect("just evaluated"),
                population_metrics: &self.reports[&step_index],
                order: self.config.order,
            };
            let trials = &self.trials;
            let lookup = |src: TrialId| trials.get(&src).map(|t| &t.assignment);
            let d = self
                .tuner
                .on_checkpoint(&view, &self.config.space, &lookup, &mut self.rng)?;
            decisions.push((id, d));
        }
        for (id, d) in decisions {
            match d {
                Decision::Continue => {}
                Decision::Stop => {
                    self.place_exited(id, ExitCause::Tuner);
                }
                Decision::ExploitExplore { source, assignment } => {
                    let t = self.trials.get_mut(&id).expect("live trial exists");
                    t.assignment = assignment.clone();
                    t.lineage = Some(source);
                    let epoch = t.epochs_done;
                    self.lineage.push(LineageEdge {
                        trial: id,
                        source,
                        epoch,
                    });
                    self.emit(EventBody::TrialExploited {
                        trial: id,
                        source,
                        epoch,
                        assignment,
                    });
                }
            }
        }

        while self.live.len() < self.grant as usize {
            if !self.create_next() {
                break;
            }
        }
        if self.live.len() < self.grant as usize {
            let from = self.grant;
            self.grant = self.live.len() as u32;
            self.emit(EventBody::GrantChanged {
                from,
                to: self.grant,
                cause: GrantCause::Release,
            });
        }

        let probe = self.probe();
        let status = check_termination(
            &self.config.termination,
            self.config.order,
            &probe,
            &mut self.tracker,
            self.next_seq - 1,
        );
        if let TerminationStatus::Terminated(reason) = status {
            self.terminate(reason);
        }
        Ok(self.drain())
    }

    fn terminate(&mut self, reason: TerminationReason) {
        let live: Vec<TrialId> = self.live.iter().copied().collect();
        for id in live {
            self.exit_to(id, ExitCause::Terminated, ExitPool::Stop);
        }
        if self.grant > 0 {
            let from = self.grant;
            self.grant = 0;
            self.emit(EventBody::GrantChanged {
                from,
                to: 0,
                cause: GrantCause::Terminated,
            });
        }
        self.status = SessionStatus::Terminated;
        self.reason = Some(reason);
        self.terminated_at = Some(self.now);
        self.emit(EventBody::SessionTerminated { reason });
    }

    /// User stop. Idempotent once terminated.
    pub fn stop(&mut self, now: u64) -> Vec<Event> {
        if self.status == SessionStatus::Terminated {
            return Vec::new();
        }
        self.now = now;
        self.terminate(TerminationReason::User);
        self.drain()
    }

    /// Give back `n` GPUs, exiting up to `n` uniformly chosen live trials.
    pub fn shrink(&mut self, n: u32, now: u64) -> Vec<Event> {
        if self.status != SessionStatus::Running || n == 0 || self.grant == 0 {
            return Vec::new();
        }
        self.now = now;
        let n = n.min(self.grant);
        let victims = n.min(self.live.len() as u32);
        for _ in 0..victims {
            let ids: Vec<TrialId> = self.live.iter().copied().collect();
            let pick = ids[self.rng.random_range(0..ids.len())];
            self.place_exited(pick, ExitCause::Shrink);
        }
        let from = self.grant;
        self.grant -= n;
        self.emit(EventBody::GrantChanged {
            from,
            to: self.grant,
            cause: GrantCause::Shrink,
        });
        self.drain()
    }

    /// Accept `n` more GPUs: revive stopped trials first, then create new ones.
    pub fn grow(&mut self, n: u32, now: u64) -> Vec<Event> {
        if self.status != SessionStatus::Running || n == 0 {
            return Vec::new();
        }
        self.now = now;
        let from = self.grant;
        self.grant += n;
        self.emit(EventBody::GrantChanged {
            from,
            to: self.grant,
            cause: GrantCause::Grow,
        });
        for _ in 0..n {
            if !self.stop_pool.is_empty() {
                let ids: Vec<TrialId> = self.stop_pool.iter().copied().collect();
                let pick = ids[self.rng.random_range(0..ids.len())];
                self.revive(pick);
            } else if !self.create_next() {
                break;
            }
        }
        self.drain()
    }

    fn revive(&mut self, id: TrialId) {
        self.stop_pool.remove(&id);
        self.live.insert(id);
        let t = self.trials.get_mut(&id).expect("stopped trial exists");
        t.state = TrialState::Running;
        let epoch = t.epochs_done;
        self.emit(EventBody::TrialRevived { trial: id, epoch });
    }

    pub fn demand(&self) -> SessionDemand {
        let cap = if self.status != SessionStatus::Running {
            Some(0)
        } else {
            self.config.termination.max_session_number.map(|max| {
                let remaining = max.saturating_sub(self.trials_created);
                let total = self.live.len() as u64 + self.stop_pool.len() as u64 + remaining;
                total.min(u64::from(u32::MAX)) as u32
            })
        };
        SessionDemand {
            id: self.id,
            grant: self.grant,
            cap,
        }
    }

    /// State in the same shape replay produces from the event log.
    pub fn observed(&self) -> ObservedSession {
        ObservedSession {
            id: self.id,
            status: self.status,
            reason: self.reason,
            grant: self.grant,
            trials_created: self.trials_created,
            trials: self
                .trials
                .values()
                .map(|t| {
                    (
                        t.id,
                        ObservedTrial {
                            id: t.id,
                            assignment: t.assignment.clone(),
                            state: t.state,
                            epochs_done: t.epochs_done,
                            last_metric: t.last_metric,
                            history: t.history.clone(),
                            lineage: t.lineage,
                        },
                    )
                })
                .collect(),
            lineage: self.lineage.clone(),
            started_at: self.started_at,
            terminated_at: self.terminated_at,
            last_seq: self.next_seq - 1,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot::from_observed(&self.observed(), &self.config.measure, self.config.order)
    }

    /// Run alone on a fixed grant, without a master, until termination or
    /// `max_ticks`. Returns the full log.
    pub fn run_with_grant(&mut self, grant: u32, max_ticks: u64) -> Result<Vec<Event>, SessionError> {
        let mut log = self.start(0);
        log.extend(self.grow(grant, 0));
        let mut tick = 0;
        while self.status == SessionStatus::Running && tick < max_ticks {
            tick += 1;
            log.extend(self.tick(tick)?);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::replay;
    use crate::space::{CheckpointStep, HyperparamSpace, ParamSpec, Termination, TuneConfig};

    fn config(stop_ratio: f64, step: CheckpointStep, max: u64) -> ChoptConfig {
        let space = HyperparamSpace::flat(vec![ParamSpec::categorical(
            "depth",
            [20i64, 92, 110, 122, 134, 140],
        )])
        .unwrap();
        ChoptConfig {
            space,
            measure: "test/accuracy".into(),
            order: Order::Descending,
            step,
            population: 4,
            tune: TuneConfig::RandomSearch,
            termination: Termination {
                max_session_number: Some(max),
                ..Default::default()
            },
            stop_ratio,
            seed: Some(7),
            workload: Some(WorkloadSpec::deep_bias(30, 0.01, 1)),
        }
    }

    fn running(cfg: ChoptConfig, grant: u32) -> Session {
        let mut s = Session::new(SessionId(1), cfg).unwrap();
        s.start(0);
        s.grow(grant, 0);
        s
    }

    #[test]
    fn stop_ratio_boundaries() {
        for (ratio, pool) in [(1.0, ExitPool::Stop), (0.0, ExitPool::Dead)] {
            let mut s = running(config(ratio, CheckpointStep::Disabled, 100), 8);
            for id in s.live().clone() {
                assert_eq!(s.place_exited(id, ExitCause::Tuner), Some(pool));
            }
        }
    }

    #[test]
    fn stop_ratio_half_concentrates() {
        let mut s = running(config(0.5, CheckpointStep::Disabled, 2000), 1000);
        let mut stopped = 0;
        for id in s.live().clone() {
            if s.place_exited(id, ExitCause::Tuner) == Some(ExitPool::Stop) {
                stopped += 1;
            }
        }
        let frac = stopped as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.04, "{frac}");
    }

    #[test]
    fn shrink_bookkeeping() {
        let mut s = running(config(0.5, CheckpointStep::Disabled, 100), 8);
        assert_eq!(s.live().len(), 8);
        let events = s.shrink(3, 1);
        assert_eq!(s.live().len(), 5);
        assert_eq!(s.grant(), 5);
        let exits = events
            .iter()
            .filter(|e| matches!(e.body, EventBody::TrialExited { .. }))
            .count();
        assert_eq!(exits, 3);
        assert!(s.shrink(0, 1).is_empty());
    }

    #[test]
    fn shrink_past_live_returns_the_rest_of_the_grant() {
        let mut s = running(config(0.5, CheckpointStep::Disabled, 2), 6);
        assert_eq!(s.live().len(), 2);
        assert_eq!(s.grant(), 6);
        s.shrink(5, 1);
        assert_eq!(s.live().len(), 0);
        assert_eq!(s.grant(), 1);
    }

    #[test]
    fn grow_revives_before_creating() {
        let mut s = running(config(1.0, CheckpointStep::Disabled, 100), 3);
        s.tick(1).unwrap();
        s.shrink(1, 2);
        let stopped: Vec<TrialId> = s.stop_pool().iter().copied().collect();
        assert_eq!(stopped.len(), 1);
        let before = s.trial(stopped[0]).unwrap().history.clone();
        let created_before = s.trials_created();
        let events = s.grow(3, 2);
        let revived: Vec<TrialId> = events
            .iter()
            .filter_map(|e| match e.body {
                EventBody::TrialRevived { trial, .. } => Some(trial),
                _ => None,
            })
            .collect();
        assert_eq!(revived, stopped);
        assert_eq!(s.trials_created(), created_before + 2);
        s.tick(3).unwrap();
        let after = &s.trial(stopped[0]).unwrap().history;
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(after.len(), before.len() + 1);
    }

    #[test]
    fn disabled_step_runs_trials_to_completion() {
        let mut s = Session::new(SessionId(1), config(0.5, CheckpointStep::Disabled, 4)).unwrap();
        let log = s.run_with_grant(4, 100).unwrap();
        assert_eq!(s.status(), SessionStatus::Terminated);
        assert_eq!(s.reason(), Some(TerminationReason::MaxSessionNumber));
        assert!(s.trials().all(|t| t.state == TrialState::Finished && t.epochs_done == 30));
        assert!(!log.iter().any(|e| matches!(e.body, EventBody::TrialExited { cause: ExitCause::Tuner, .. })));
    }

    #[test]
    fn replay_matches_live_state() {
        let mut s = Session::new(SessionId(1), config(0.5, CheckpointStep::Every(3), 40)).unwrap();
        let mut log = s.run_with_grant(5, 10).unwrap();
        log.extend(s.shrink(2, 10));
        log.extend(s.grow(4, 10));
        log.extend(s.tick(11).unwrap());
        assert_eq!(replay(SessionId(1), &log).unwrap(), s.observed());
    }

    #[test]
    fn empty_snapshot_has_no_best() {
        let s = Session::new(SessionId(1), config(0.5, CheckpointStep::Disabled, 4)).unwrap();
        let snap = s.snapshot();
        assert!(snap.best.is_none());
        assert!(snap.pools.live.is_empty() && snap.trials.is_empty());
    }

    #[test]
    fn stop_is_idempotent() {
        let mut s = running(config(0.5, CheckpointStep::Disabled, 10), 2);
        let first = s.stop(3);
        assert!(matches!(first.last().unwrap().body, EventBody::SessionTerminated { .. }));
        assert!(s.stop(4).is_empty());
        assert_eq!(s.stop_pool().len(), 2);
    }
}

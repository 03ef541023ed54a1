//! Discrete-event driver tying the master, the sessions, and the store
//! together on a simulated clock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::events::{Event, SessionStatus};
use crate::ids::{AgentId, SessionId};
use crate::master::{
    rebalance, utilization, AgentRegistry, ClusterConfig, ClusterState, Command, MasterEvent,
    MasterEventBody,
};
use crate::orchestrator::{Session, SessionError};
use crate::simcluster::{DemandTrace, SimClock, TraceError};
use crate::space::{ChoptConfig, ConfigError};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("session {session}: {source}")]
    Session {
        session: SessionId,
        #[source]
        source: SessionError,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid cluster: {0}")]
    Cluster(String),
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("agent {0} not found")]
    UnknownAgent(AgentId),
}

/// Per-tick cluster figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickStats {
    pub tick: u64,
    pub demand: u32,
    pub non_chopt_used: u32,
    pub chopt_total: u32,
    /// Rebalance target, when a master was available this tick.
    pub target: Option<u32>,
    pub utilization: f64,
    pub queued: usize,
    pub running: usize,
    pub master: Option<AgentId>,
}

pub struct Engine {
    config: ClusterConfig,
    cluster: ClusterState,
    trace: DemandTrace,
    clock: SimClock,
    registry: AgentRegistry,
    queue: VecDeque<SessionId>,
    sessions: BTreeMap<SessionId, Session>,
    store: Store,
    master_seq: u64,
    hold: BTreeSet<SessionId>,
    stats: Vec<TickStats>,
}

impl Engine {
    pub fn new(config: ClusterConfig, trace: DemandTrace, store: Store) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Cluster)?;
        trace.check_capacity(config.capacity)?;
        let master_seq = store.master_events().last().map_or(0, |e| e.seq);
        Ok(Engine {
            cluster: ClusterState::new(&config),
            registry: AgentRegistry::new(config.agents),
            config,
            trace,
            clock: SimClock::default(),
            queue: VecDeque::new(),
            sessions: BTreeMap::new(),
            store,
            master_seq,
            hold: BTreeSet::new(),
            stats: Vec::new(),
        })
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn cluster_config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn registry(&self) -> &AgentRegistry {
        &self.registry
    }

    pub fn queue(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.queue.iter().copied()
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn stats(&self) -> &[TickStats] {
        &self.stats
    }

    pub fn utilization(&self) -> f64 {
        utilization(&self.cluster)
    }

    fn log_master(&mut self, body: MasterEventBody) -> Result<(), EngineError> {
        self.master_seq += 1;
        let e = MasterEvent {
            seq: self.master_seq,
            time: self.clock.now(),
            body,
        };
        self.store.append_master(e)?;
        Ok(())
    }

    fn record(&mut self, id: SessionId, events: Vec<Event>) -> Result<(), EngineError> {
        if !events.is_empty() {
            self.store.append_events(id, events)?;
        }
        Ok(())
    }

    /// Validate and enqueue a session.
    pub fn submit(&mut self, config: ChoptConfig, base: Option<SessionId>) -> Result<SessionId, EngineError> {
        let id = self.store.next_session_id();
        let session = Session::new(id, config.clone())?;
        self.store.create_session(id, config, self.clock.now(), base)?;
        self.sessions.insert(id, session);
        self.queue.push_back(id);
        self.log_master(MasterEventBody::SessionQueued { session: id })?;
        Ok(id)
    }

    /// User stop; removes a queued session from the queue. Idempotent.
    pub fn stop(&mut self, id: SessionId) -> Result<SessionStatus, EngineError> {
        let now = self.clock.now();
        let session = self.sessions.get_mut(&id).ok_or(EngineError::NotFound(id))?;
        let before = session.status();
        let events = session.stop(now);
        if before == SessionStatus::Queued {
            self.queue.retain(|s| *s != id);
            self.log_master(MasterEventBody::SessionDequeued { session: id })?;
        }
        self.registry.release(id);
        self.cluster.grants.remove(&id);
        self.record(id, events)?;
        Ok(before)
    }

    fn agent_mut(&mut self, id: AgentId) -> Result<&mut crate::master::AgentInfo, EngineError> {
        self.registry
            .agents
            .get_mut(&id)
            .ok_or(EngineError::UnknownAgent(id))
    }

    /// Crash an agent; noticed at the next registry pass.
    pub fn kill_agent(&mut self, id: AgentId) -> Result<(), EngineError> {
        self.agent_mut(id)?.killed = true;
        Ok(())
    }

    /// Make an agent stop responding; noticed once its heartbeats time out.
    pub fn hang_agent(&mut self, id: AgentId) -> Result<(), EngineError> {
        self.agent_mut(id)?.hung = true;
        Ok(())
    }

    pub fn recover_agent(&mut self, id: AgentId) -> Result<(), EngineError> {
        let a = self.agent_mut(id)?;
        a.killed = false;
        a.hung = false;
        Ok(())
    }

    fn hosted_responsive(&self, id: SessionId) -> bool {
        self.registry
            .host_of(id)
            .and_then(|a| self.registry.agents.get(&a))
            .is_some_and(|a| a.responsive())
    }

    /// Advance the simulation by one tick.
    pub fn tick(&mut self) -> Result<TickStats, EngineError> {
        let now = self.clock.advance();
        let demand = self.trace.at(now);
        let slots = self.config.sessions_per_agent;

        for body in self
            .registry
            .refresh(now, self.config.heartbeat_timeout, slots)
        {
            self.log_master(body)?;
        }

        let mut pending: BTreeMap<SessionId, Vec<Event>> = BTreeMap::new();
        let mut target = None;
        if self.registry.master_responsive() {
            while let Some(&id) = self.queue.front() {
                let Some(agent) = self.registry.free_agent(slots) else {
                    break;
                };
                self.queue.pop_front();
                self.registry
                    .agents
                    .get_mut(&agent)
                    .expect("free agent exists")
                    .sessions
                    .push(id);
                self.log_master(MasterEventBody::SessionDispatched { session: id, agent })?;
                let events = self.sessions.get_mut(&id).expect("queued session").start(now);
                pending.entry(id).or_default().extend(events);
            }

            let demands: Vec<_> = self
                .sessions
                .values()
                .filter(|s| s.status() == SessionStatus::Running)
                .map(Session::demand)
                .collect();
            let plan = rebalance(&self.cluster, demand, &demands, &self.hold);
            let mut shrunk = BTreeSet::new();
            for (id, cmd) in &plan.commands {
                let s = self.sessions.get_mut(id).expect("running session");
                let events = match *cmd {
                    Command::Shrink(n) => {
                        shrunk.insert(*id);
                        s.shrink(n, now)
                    }
                    Command::Grow(n) => s.grow(n, now),
                };
                pending.entry(*id).or_default().extend(events);
            }
            if !plan.commands.is_empty() {
                self.log_master(MasterEventBody::Rebalanced {
                    demand,
                    target: plan.target,
                    commands: plan.commands.clone(),
                })?;
            }
            self.hold = shrunk;
            target = Some(plan.target);
        } else {
            self.hold.clear();
        }

        let ids: Vec<SessionId> = self.sessions.keys().copied().collect();
        for id in ids {
            if !self.hosted_responsive(id) {
                continue;
            }
            let s = self.sessions.get_mut(&id).expect("known session");
            let events = s
                .tick(now)
                .map_err(|source| EngineError::Session { session: id, source })?;
            pending.entry(id).or_default().extend(events);
            if s.status() == SessionStatus::Terminated {
                self.registry.release(id);
            }
        }

        self.cluster.grants = self
            .sessions
            .values()
            .filter(|s| s.grant() > 0)
            .map(|s| (s.id(), s.grant()))
            .collect();
        self.cluster.settle(demand);

        for (id, events) in pending {
            self.record(id, events)?;
        }

        let stats = TickStats {
            tick: now,
            demand,
            non_chopt_used: self.cluster.non_chopt_used,
            chopt_total: self.cluster.chopt_total(),
            target,
            utilization: utilization(&self.cluster),
            queued: self.queue.len(),
            running: self
                .sessions
                .values()
                .filter(|s| s.status() == SessionStatus::Running)
                .count(),
            master: self.registry.master,
        };
        self.stats.push(stats.clone());
        Ok(stats)
    }

    /// Whether any session is queued or running.
    pub fn busy(&self) -> bool {
        !self.queue.is_empty()
            || self
                .sessions
                .values()
                .any(|s| s.status() == SessionStatus::Running)
    }

    /// Tick until no session is queued or running, or `max_ticks` elapse.
    /// Returns the number of ticks run.
    pub fn run_until_idle(&mut self, max_ticks: u64) -> Result<u64, EngineError> {
        let mut n = 0;
        while self.busy() && n < max_ticks {
            self.tick()?;
            n += 1;
        }
        Ok(n)
    }

    /// Tick until the clock reaches `tick`.
    pub fn run_to(&mut self, tick: u64) -> Result<(), EngineError> {
        while self.clock.now() < tick {
            self.tick()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{parse_config, LISTING};

    fn engine(capacity: u32, demand: u32) -> Engine {
        Engine::new(
            ClusterConfig::new(capacity),
            DemandTrace::constant(demand),
            Store::in_memory(),
        )
        .unwrap()
    }

    #[test]
    fn fifo_dispatch_and_completion() {
        let mut e = engine(20, 0);
        let cfg = parse_config(LISTING.as_bytes()).unwrap();
        let a = e.submit(cfg.clone(), None).unwrap();
        let b = e.submit(cfg, None).unwrap();
        assert_eq!(e.queue().collect::<Vec<_>>(), vec![a, b]);
        e.tick().unwrap();
        let dispatched: Vec<SessionId> = e
            .store()
            .master_events()
            .iter()
            .filter_map(|m| match m.body {
                MasterEventBody::SessionDispatched { session, .. } => Some(session),
                _ => None,
            })
            .collect();
        assert_eq!(dispatched, vec![a, b]);
        e.run_until_idle(10_000).unwrap();
        for id in [a, b] {
            let rec = e.store().load_session(id).unwrap();
            assert_eq!(rec.state.status, SessionStatus::Terminated);
            assert_eq!(rec.state.trials_created, 50);
        }
    }

    #[test]
    fn queued_until_a_slot_frees() {
        let mut cfg = ClusterConfig::new(20);
        cfg.agents = 1;
        cfg.sessions_per_agent = 1;
        let mut e = Engine::new(cfg, DemandTrace::constant(0), Store::in_memory()).unwrap();
        let c = parse_config(LISTING.as_bytes()).unwrap();
        let a = e.submit(c.clone(), None).unwrap();
        let b = e.submit(c, None).unwrap();
        e.tick().unwrap();
        assert_eq!(e.queue().collect::<Vec<_>>(), vec![b]);
        e.stop(a).unwrap();
        e.tick().unwrap();
        assert_eq!(e.queue().count(), 0);
        assert_eq!(e.session(b).unwrap().status(), SessionStatus::Running);
    }

    #[test]
    fn stopping_a_queued_session_dequeues_it() {
        let mut e = engine(20, 0);
        let c = parse_config(LISTING.as_bytes()).unwrap();
        let a = e.submit(c, None).unwrap();
        assert_eq!(e.stop(a).unwrap(), SessionStatus::Queued);
        assert_eq!(e.queue().count(), 0);
        assert_eq!(e.stop(a).unwrap(), SessionStatus::Terminated);
        let rec = e.store().load_session(a).unwrap();
        assert_eq!(rec.events.len(), 1);
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let mut e = engine(10, 7);
        let c = parse_config(LISTING.as_bytes()).unwrap();
        for _ in 0..3 {
            e.submit(c.clone(), None).unwrap();
        }
        for _ in 0..60 {
            let s = e.tick().unwrap();
            assert!(s.non_chopt_used + s.chopt_total <= 10);
        }
    }
}

//! Cluster-wide arbitration: the session queue, agent registry and
//! election, and the rebalancing policy that moves GPUs between CHOPT
//! sessions and everything else.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, SessionId};
use crate::orchestrator::SessionDemand;

/// Static description of the simulated cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub capacity: u32,
    /// Idle GPUs kept free; defaults to 5% of capacity.
    #[serde(default)]
    pub headroom: Option<u32>,
    /// Soft ceiling on the total CHOPT grant.
    #[serde(default)]
    pub chopt_cap: Option<u32>,
    #[serde(default = "default_agents")]
    pub agents: u32,
    #[serde(default = "default_slots")]
    pub sessions_per_agent: u32,
    #[serde(default = "default_timeout")]
    pub heartbeat_timeout: u64,
}

fn default_agents() -> u32 {
    3
}

fn default_slots() -> u32 {
    4
}

fn default_timeout() -> u64 {
    3
}

/// 5% of capacity, rounded to the nearest GPU.
pub fn default_headroom(capacity: u32) -> u32 {
    ((u64::from(capacity) * 5 + 50) / 100) as u32
}

impl ClusterConfig {
    pub fn new(capacity: u32) -> Self {
        ClusterConfig {
            capacity,
            headroom: None,
            chopt_cap: None,
            agents: default_agents(),
            sessions_per_agent: default_slots(),
            heartbeat_timeout: default_timeout(),
        }
    }

    pub fn effective_headroom(&self) -> u32 {
        self.headroom.unwrap_or_else(|| default_headroom(self.capacity))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 {
            return Err("capacity must be positive".into());
        }
        if self.effective_headroom() > self.capacity {
            return Err("headroom exceeds capacity".into());
        }
        if self.agents == 0 || self.sessions_per_agent == 0 {
            return Err("need at least one agent with one session slot".into());
        }
        if self.heartbeat_timeout == 0 {
            return Err("heartbeat_timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub capacity: u32,
    pub non_chopt_used: u32,
    pub grants: BTreeMap<SessionId, u32>,
    pub headroom: u32,
    pub chopt_cap: Option<u32>,
}

impl ClusterState {
    pub fn new(config: &ClusterConfig) -> Self {
        ClusterState {
            capacity: config.capacity,
            non_chopt_used: 0,
            grants: BTreeMap::new(),
            headroom: config.effective_headroom(),
            chopt_cap: config.chopt_cap,
        }
    }

    pub fn chopt_total(&self) -> u32 {
        self.grants.values().sum()
    }

    /// External demand runs on whatever CHOPT leaves free.
    pub fn settle(&mut self, demand: u32) {
        self.non_chopt_used = demand.min(self.capacity.saturating_sub(self.chopt_total()));
    }
}

pub fn utilization(cluster: &ClusterState) -> f64 {
    if cluster.capacity == 0 {
        return 0.0;
    }
    f64::from(cluster.non_chopt_used + cluster.chopt_total()) / f64::from(cluster.capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "n")]
pub enum Command {
    Shrink(u32),
    Grow(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rebalance {
    pub target: u32,
    pub commands: Vec<(SessionId, Command)>,
}

/// Total CHOPT grant the master aims for.
pub fn rebalance_target(cluster: &ClusterState, demand: u32, sessions: &[SessionDemand]) -> u32 {
    let floor: u32 = sessions.iter().map(|s| s.cap.map_or(1, |c| c.min(1))).sum();
    let absorbable: u64 = sessions
        .iter()
        .map(|s| s.cap.map_or(u64::from(u32::MAX), u64::from))
        .sum();
    let avail = cluster
        .capacity
        .saturating_sub(demand.saturating_add(cluster.headroom));
    let t = avail
        .min(cluster.chopt_cap.unwrap_or(u32::MAX))
        .min(absorbable.min(u64::from(u32::MAX)) as u32);
    t.max(floor).min(cluster.capacity)
}

/// Split `total` in proportion to `weights`, never giving an entry more
/// than its limit. Whole units go by largest remainder, ties to the lower
/// index; amounts a saturated entry cannot take are redistributed.
pub fn apportion(total: u32, weights: &[u64], limits: &[u32]) -> Vec<u32> {
    assert_eq!(weights.len(), limits.len());
    let n = weights.len();
    let mut out = vec![0u32; n];
    let mut remaining = total;
    while remaining > 0 {
        let active: Vec<usize> = (0..n)
            .filter(|&i| out[i] < limits[i] && weights[i] > 0)
            .collect();
        if active.is_empty() {
            break;
        }
        let w_sum: u128 = active.iter().map(|&i| u128::from(weights[i])).sum();
        let mut given = 0u32;
        let mut rems = Vec::new();
        for &i in &active {
            let q = u128::from(remaining) * u128::from(weights[i]);
            let base = (q / w_sum) as u32;
            let g = base.min(limits[i] - out[i]);
            out[i] += g;
            given += g;
            if g == base && out[i] < limits[i] {
                rems.push((q % w_sum, i));
            }
        }
        remaining -= given;
        rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, i) in rems {
            if remaining == 0 {
                break;
            }
            out[i] += 1;
            remaining -= 1;
        }
    }
    out
}

/// Per-session grant changes that move the CHOPT total to the target.
/// `hold` lists sessions shrunk in the previous tick, which may not grow.
pub fn rebalance(
    cluster: &ClusterState,
    demand: u32,
    sessions: &[SessionDemand],
    hold: &BTreeSet<SessionId>,
) -> Rebalance {
    let target = rebalance_target(cluster, demand, sessions);
    let mut next: Vec<u32> = sessions
        .iter()
        .map(|s| {
            let floor = s.cap.map_or(1, |c| c.min(1));
            s.grant.max(floor)
        })
        .collect();
    let current: u32 = next.iter().sum();
    if current > target {
        let weights: Vec<u64> = next.iter().map(|&g| u64::from(g)).collect();
        let limits: Vec<u32> = sessions
            .iter()
            .zip(&next)
            .map(|(s, &g)| g - s.cap.map_or(1, |c| c.min(1)).min(g))
            .collect();
        let cuts = apportion(current - target, &weights, &limits);
        for (g, c) in next.iter_mut().zip(cuts) {
            *g -= c;
        }
    } else if current < target {
        let weights: Vec<u64> = next.iter().map(|&g| u64::from(g.max(1))).collect();
        let limits: Vec<u32> = sessions
            .iter()
            .zip(&next)
            .map(|(s, &g)| {
                if hold.contains(&s.id) {
                    0
                } else {
                    s.cap.map_or(u32::MAX - g, |c| c.saturating_sub(g))
                }
            })
            .collect();
        let adds = apportion(target - current, &weights, &limits);
        for (g, a) in next.iter_mut().zip(adds) {
            *g += a;
        }
    }
    let commands = sessions
        .iter()
        .zip(next)
        .filter_map(|(s, g)| match g.cmp(&s.grant) {
            std::cmp::Ordering::Greater => Some((s.id, Command::Grow(g - s.grant))),
            std::cmp::Ordering::Less => Some((s.id, Command::Shrink(s.grant - g))),
            std::cmp::Ordering::Equal => None,
        })
        .collect();
    Rebalance { target, commands }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInfo {
    /// Whether the registry currently counts the agent as a member.
    pub alive: bool,
    /// Crashed: detected at the next registry pass.
    pub killed: bool,
    /// Unresponsive: detected only once heartbeats time out.
    pub hung: bool,
    pub last_heartbeat: u64,
    pub sessions: Vec<SessionId>,
}

impl AgentInfo {
    pub fn responsive(&self) -> bool {
        self.alive && !self.killed && !self.hung
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegistry {
    pub agents: BTreeMap<AgentId, AgentInfo>,
    pub master: Option<AgentId>,
}

/// Deterministic stand-in for leader election: the lowest alive agent id.
pub fn elect(registry: &AgentRegistry) -> Option<AgentId> {
    registry
        .agents
        .iter()
        .find(|(_, a)| a.alive)
        .map(|(id, _)| *id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    Killed,
    HeartbeatTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MasterEventBody {
    AgentFailed { agent: AgentId, cause: FailureCause },
    AgentRecovered { agent: AgentId },
    MasterElected { agent: AgentId },
    MasterLost,
    SessionQueued { session: SessionId },
    SessionDequeued { session: SessionId },
    SessionDispatched { session: SessionId, agent: AgentId },
    SessionRehomed { session: SessionId, from: AgentId, to: AgentId },
    Rebalanced {
        demand: u32,
        target: u32,
        commands: Vec<(SessionId, Command)>,
    },
}

impl MasterEventBody {
    /// Registry and election bookkeeping, as opposed to scheduling decisions.
    pub fn is_election(&self) -> bool {
        matches!(
            self,
            MasterEventBody::AgentFailed { .. }
                | MasterEventBody::AgentRecovered { .. }
                | MasterEventBody::MasterElected { .. }
                | MasterEventBody::MasterLost
                | MasterEventBody::SessionRehomed { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterEvent {
    pub seq: u64,
    pub time: u64,
    #[serde(flatten)]
    pub body: MasterEventBody,
}

impl AgentRegistry {
    pub fn new(agents: u32) -> Self {
        AgentRegistry {
            agents: (1..=agents)
                .map(|i| {
                    (
                        AgentId(i),
                        AgentInfo {
                            alive: true,
                            killed: false,
                            hung: false,
                            last_heartbeat: 0,
                            sessions: Vec::new(),
                        },
                    )
                })
                .collect(),
            master: None,
        }
    }

    pub fn master_responsive(&self) -> bool {
        self.master
            .and_then(|m| self.agents.get(&m))
            .is_some_and(AgentInfo::responsive)
    }

    /// Responsive agent with a free slot, least loaded first.
    pub fn free_agent(&self, slots: u32) -> Option<AgentId> {
        self.agents
            .iter()
            .filter(|(_, a)| a.responsive() && (a.sessions.len() as u32) < slots)
            .min_by_key(|(id, a)| (a.sessions.len(), **id))
            .map(|(id, _)| *id)
    }

    pub fn host_of(&self, session: SessionId) -> Option<AgentId> {
        self.agents
            .iter()
            .find(|(_, a)| a.sessions.contains(&session))
            .map(|(id, _)| *id)
    }

    pub fn release(&mut self, session: SessionId) {
        for a in self.agents.values_mut() {
            a.sessions.retain(|s| *s != session);
        }
    }

    /// Heartbeats, failure detection, election, and rehoming of sessions
    /// whose agent left. Returns the bookkeeping events.
    pub fn refresh(&mut self, now: u64, timeout: u64, slots: u32) -> Vec<MasterEventBody> {
        let mut out = Vec::new();
        for (id, a) in self.agents.iter_mut() {
            if a.killed || a.hung {
                if a.alive && (a.killed || now.saturating_sub(a.last_heartbeat) >= timeout) {
                    a.alive = false;
                    out.push(MasterEventBody::AgentFailed {
                        agent: *id,
                        cause: if a.killed {
                            FailureCause::Killed
                        } else {
                            FailureCause::HeartbeatTimeout
                        },
                    });
                }
            } else {
                a.last_heartbeat = now;
                if !a.alive {
                    a.alive = true;
                    out.push(MasterEventBody::AgentRecovered { agent: *id });
                }
            }
        }
        let elected = elect(self);
        if elected != self.master {
            self.master = elected;
            out.push(match elected {
                Some(agent) => MasterEventBody::MasterElected { agent },
                None => MasterEventBody::MasterLost,
            });
        }
        let orphans: Vec<(AgentId, SessionId)> = self
            .agents
            .iter()
            .filter(|(_, a)| !a.alive)
            .flat_map(|(id, a)| a.sessions.iter().map(move |s| (*id, *s)))
            .collect();
        for (from, session) in orphans {
            let Some(to) = self.free_agent(slots) else {
                break;
            };
            self.agents
                .get_mut(&from)
                .expect("known agent")
                .sessions
                .retain(|s| *s != session);
            self.agents.get_mut(&to).expect("known agent").sessions.push(session);
            out.push(MasterEventBody::SessionRehomed { session, from, to });
        }
        out
    }
}

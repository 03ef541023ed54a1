//! Hyperband bracket schedule and its asynchronous round bookkeeping.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rank, CheckpointView, Decision, PendingTrial};
use crate::ids::TrialId;
use crate::space::{HyperbandConfig, HyperparamSpace};

/// One successive-halving round: `n` trials trained to `r` checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub n: u64,
    pub r: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandBracket {
    pub s: u32,
    pub rounds: Vec<Round>,
}

impl HyperbandBracket {
    /// Budget of the bracket when every round trains its trials for `r`
    /// checkpoints: the sum of `n * r`.
    pub fn total_resource(&self) -> u64 {
        self.rounds.iter().map(|r| r.n * r.r).sum()
    }

    /// Checkpoints actually trained when promoted trials resume instead of
    /// restarting.
    pub fn incremental_resource(&self) -> u64 {
        let mut total = 0;
        let mut prev_r = 0;
        for round in &self.rounds {
            total += round.n * (round.r - prev_r);
            prev_r = round.r;
        }
        total
    }
}

/// Bracket table for maximum resource `r_max` (in checkpoints) and
/// reduction factor `eta`, most exploratory bracket first.
pub fn hyperband_schedule(r_max: u64, eta: u64) -> Vec<HyperbandBracket> {
    assert!(r_max >= 1 && eta >= 2, "hyperband needs R >= 1 and eta >= 2");
    let mut s_max = 0u32;
    while eta.pow(s_max + 1) <= r_max {
        s_max += 1;
    }
    (0..=s_max)
        .rev()
        .map(|s| {
            let eta_s = eta.pow(s);
            let numer = u64::from(s_max + 1) * eta_s;
            let n = numer.div_ceil(u64::from(s + 1));
            let rounds = (0..=s)
                .map(|i| Round {
                    n: n / eta.pow(i),
                    r: r_max / eta.pow(s - i),
                })
                .collect();
            HyperbandBracket { s, rounds }
        })
        .collect()
}

/// Identifies one bracket instance: the `iteration`-th pass over the
/// schedule, bracket `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BracketTag {
    pub iteration: u32,
    pub s: u32,
}

#[derive(Debug, Clone, Default)]
struct RoundState {
    reported: Vec<(TrialId, f64)>,
    promoted: u64,
}

#[derive(Debug, Clone)]
pub struct Hyperband {
    config: HyperbandConfig,
    step: u32,
    schedule: Vec<HyperbandBracket>,
    next: usize,
    iteration: u32,
    members: BTreeMap<TrialId, BracketTag>,
    rounds: BTreeMap<(BracketTag, usize), RoundState>,
}

impl Hyperband {
    pub fn new(config: HyperbandConfig, step: u32) -> Self {
        let schedule = hyperband_schedule(u64::from(config.resource_limit), u64::from(config.eta));
        Hyperband {
            config,
            step,
            schedule,
            next: 0,
            iteration: 0,
            members: BTreeMap::new(),
            rounds: BTreeMap::new(),
        }
    }

    pub fn schedule(&self) -> &[HyperbandBracket] {
        &self.schedule
    }

    pub fn max_epochs(&self) -> u32 {
        self.config.resource_limit.saturating_mul(self.step)
    }

    fn bracket(&self, s: u32) -> &HyperbandBracket {
        &self.schedule[self.schedule.len() - 1 - s as usize]
    }

    /// Sample the first round of the next bracket, cycling through the schedule.
    pub fn next_bracket<R: Rng + ?Sized>(
        &mut self,
        space: &HyperparamSpace,
        rng: &mut R,
    ) -> Vec<PendingTrial> {
        let bracket = &self.schedule[self.next];
        let tag = BracketTag {
            iteration: self.iteration,
            s: bracket.s,
        };
        let n = bracket.rounds[0].n;
        self.next += 1;
        if self.next == self.schedule.len() {
            self.next = 0;
            self.iteration += 1;
        }
        (0..n)
            .map(|_| PendingTrial {
                assignment: space.sample(rng),
                bracket: Some(tag),
            })
            .collect()
    }

    pub fn register(&mut self, id: TrialId, tag: BracketTag) {
        self.members.insert(id, tag);
    }

    /// Round-boundary decision. A trial finishing round `i` is promoted when
    /// it ranks within the next round's size among the round's reporters so
    /// far and that round still has room.
    pub fn on_checkpoint(&mut self, view: &CheckpointView<'_>) -> Decision {
        let Some(&tag) = self.members.get(&view.trial) else {
            return Decision::Continue;
        };
        if self.step == 0 || !view.step_index.is_multiple_of(self.step) {
            return Decision::Continue;
        }
        let checkpoints = u64::from(view.step_index / self.step);
        let bracket = self.bracket(tag.s);
        let Some(i) = bracket.rounds.iter().position(|r| r.r == checkpoints) else {
            return Decision::Continue;
        };
        if i + 1 == bracket.rounds.len() {
            return Decision::Continue;
        }
        let quota = bracket.rounds[i + 1].n;
        let state = self.rounds.entry((tag, i)).or_default();
        state.reported.push((view.trial, view.metric));
        let ranked = rank(&state.reported, view.order);
        let pos = ranked
            .iter()
            .position(|(id, _)| *id == view.trial)
            .expect("just inserted") as u64;
        if pos < quota && state.promoted < quota {
            state.promoted += 1;
            Decision::Continue
        } else {
            Decision::Stop
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Order;

    fn table(r: u64, eta: u64) -> Vec<(u32, u64, u64)> {
        hyperband_schedule(r, eta)
            .iter()
            .map(|b| (b.s, b.rounds[0].n, b.rounds[0].r))
            .collect()
    }

    #[test]
    fn classic_81_table() {
        assert_eq!(
            table(81, 3),
            vec![(4, 81, 1), (3, 34, 3), (2, 15, 9), (1, 8, 27), (0, 5, 81)]
        );
        let s3 = &hyperband_schedule(81, 3)[1];
        let ns: Vec<u64> = s3.rounds.iter().map(|r| r.n).collect();
        let rs: Vec<u64> = s3.rounds.iter().map(|r| r.r).collect();
        assert_eq!(ns, vec![34, 11, 3, 1]);
        assert_eq!(rs, vec![3, 9, 27, 81]);
    }

    #[test]
    fn small_tables() {
        assert_eq!(table(1, 3), vec![(0, 1, 1)]);
        assert_eq!(table(9, 3), vec![(2, 9, 1), (1, 5, 3), (0, 3, 9)]);
    }

    #[test]
    fn total_resource_counts_incremental_training() {
        let b = &hyperband_schedule(9, 3)[0];
        // 9 trials x 1, then 3 continue 2 more, then 1 continues 6 more.
        assert_eq!(b.incremental_resource(), 9 + 3 * 2 + 6);
        assert_eq!(b.total_resource(), 9 + 3 * 3 + 9);
    }

    fn hb(r: u32, eta: u32, step: u32) -> Hyperband {
        Hyperband::new(HyperbandConfig { resource_limit: r, eta }, step)
    }

    #[test]
    fn round_boundary_promotes_within_quota() {
        let mut h = hyperband_schedule_instance();
        let tag = BracketTag { iteration: 0, s: 2 };
        for id in 1..=9 {
            h.register(TrialId(id), tag);
        }
        // Round 0 ends after 1 checkpoint (step 2 -> epoch 2); 3 promotions.
        let mut decisions = Vec::new();
        let mut reported = Vec::new();
        for id in 1..=9u32 {
            let metric = id as f64 / 10.0;
            reported.push((TrialId(id), metric));
            let v = CheckpointView {
                trial: TrialId(id),
                step_index: 2,
                metric,
                population_metrics: &reported,
                order: Order::Descending,
            };
            decisions.push(h.on_checkpoint(&v));
        }
        let continued = decisions.iter().filter(|d| **d == Decision::Continue).count();
        assert_eq!(continued, 3);
        // Off-boundary checkpoints never stop.
        let v = CheckpointView {
            trial: TrialId(1),
            step_index: 4,
            metric: 0.0,
            population_metrics: &[(TrialId(1), 0.0)],
            order: Order::Descending,
        };
        assert_eq!(h.on_checkpoint(&v), Decision::Continue);
    }

    fn hyperband_schedule_instance() -> Hyperband {
        hb(9, 3, 2)
    }

    #[test]
    fn max_epochs_is_r_times_step() {
        assert_eq!(hb(9, 3, 5).max_epochs(), 45);
    }
}

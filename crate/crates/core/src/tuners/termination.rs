//! Session termination conditions.

use serde::{Deserialize, Serialize};

use crate::space::{Order, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Time,
    MaxSessionNumber,
    PerformanceThreshold,
    User,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::Time => "time",
            TerminationReason::MaxSessionNumber => "max_session_number",
            TerminationReason::PerformanceThreshold => "performance_threshold",
            TerminationReason::User => "user",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationStatus {
    Continue,
    Terminated(TerminationReason),
}

/// The session facts termination depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminationProbe {
    /// Simulated ticks since the session started.
    pub elapsed: u64,
    pub trials_created: u64,
    pub live: usize,
    pub best: Option<f64>,
}

/// Remembers the event sequence number at which each condition first held,
/// so that the reported reason is the condition reached first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TerminationTracker {
    time: Option<u64>,
    count: Option<u64>,
    threshold: Option<u64>,
}

impl TerminationTracker {
    /// Record which conditions hold as of event `seq`.
    pub fn observe(&mut self, t: &Termination, order: Order, probe: &TerminationProbe, seq: u64) {
        if self.time.is_none() && t.time.is_some_and(|budget| probe.elapsed >= budget) {
            self.time = Some(seq);
        }
        // The count condition waits for the last created trial to leave the
        // live pool, so every trial gets to finish its run.
        if self.count.is_none()
            && t.max_session_number.is_some_and(|max| probe.trials_created >= max)
            && probe.live == 0
        {
            self.count = Some(seq);
        }
        if self.threshold.is_none() {
            if let (Some(th), Some(best)) = (t.performance_threshold, probe.best) {
                if order.reaches(best, th) {
                    self.threshold = Some(seq);
                }
            }
        }
    }

    /// The earliest condition reached; ties resolve time, count, threshold.
    pub fn reason(&self) -> Option<TerminationReason> {
        [
            (self.time, TerminationReason::Time),
            (self.count, TerminationReason::MaxSessionNumber),
            (self.threshold, TerminationReason::PerformanceThreshold),
        ]
        .into_iter()
        .filter_map(|(seq, r)| seq.map(|s| (s, r)))
        .min_by_key(|(s, _)| *s)
        .map(|(_, r)| r)
    }
}

pub fn check_termination(
    t: &Termination,
    order: Order,
    probe: &TerminationProbe,
    tracker: &mut TerminationTracker,
    seq: u64,
) -> TerminationStatus {
    tracker.observe(t, order, probe, seq);
    match tracker.reason() {
        Some(r) => TerminationStatus::Terminated(r),
        None => TerminationStatus::Continue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(elapsed: u64, created: u64, live: usize, best: Option<f64>) -> TerminationProbe {
        TerminationProbe {
            elapsed,
            trials_created: created,
            live,
            best,
        }
    }

    #[test]
    fn count_reached() {
        let t = Termination {
            max_session_number: Some(50),
            ..Default::default()
        };
        let mut tr = TerminationTracker::default();
        let st = check_termination(&t, Order::Descending, &probe(10, 50, 0, None), &mut tr, 7);
        assert_eq!(st, TerminationStatus::Terminated(TerminationReason::MaxSessionNumber));
    }

    #[test]
    fn count_waits_for_live_trials() {
        let t = Termination {
            max_session_number: Some(50),
            ..Default::default()
        };
        let mut tr = TerminationTracker::default();
        let st = check_termination(&t, Order::Descending, &probe(10, 50, 3, None), &mut tr, 7);
        assert_eq!(st, TerminationStatus::Continue);
    }

    #[test]
    fn threshold_not_reached() {
        let t = Termination {
            max_session_number: Some(50),
            performance_threshold: Some(0.99),
            ..Default::default()
        };
        let mut tr = TerminationTracker::default();
        let st = check_termination(&t, Order::Descending, &probe(3, 10, 4, Some(0.5)), &mut tr, 2);
        assert_eq!(st, TerminationStatus::Continue);
        let st = check_termination(&t, Order::Ascending, &probe(3, 10, 4, Some(0.5)), &mut tr, 3);
        assert_eq!(st, TerminationStatus::Terminated(TerminationReason::PerformanceThreshold));
    }

    #[test]
    fn first_logged_condition_wins() {
        let t = Termination {
            time: Some(100),
            max_session_number: Some(5),
            performance_threshold: None,
        };
        // Count held at seq 40, time only at seq 41.
        let mut tr = TerminationTracker::default();
        tr.observe(&t, Order::Descending, &probe(99, 5, 0, None), 40);
        let st = check_termination(&t, Order::Descending, &probe(100, 5, 0, None), &mut tr, 41);
        assert_eq!(st, TerminationStatus::Terminated(TerminationReason::MaxSessionNumber));

        let mut tr = TerminationTracker::default();
        tr.observe(&t, Order::Descending, &probe(100, 4, 1, None), 40);
        let st = check_termination(&t, Order::Descending, &probe(100, 5, 0, None), &mut tr, 41);
        assert_eq!(st, TerminationStatus::Terminated(TerminationReason::Time));
    }
}

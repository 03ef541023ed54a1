//! Checkpoint decision strategies: random search with the median stopping
//! rule, population based training, and Hyperband.

mod hyperband;
mod termination;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::TrialId;
use crate::space::{Assignment, ChoptConfig, HyperparamSpace, Order, PbtConfig, TuneConfig};

pub use hyperband::{hyperband_schedule, BracketTag, Hyperband, HyperbandBracket, Round};
pub use termination::{
    check_termination, TerminationProbe, TerminationReason, TerminationStatus, TerminationTracker,
};

/// What a session should do with a trial that just reached a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Continue,
    Stop,
    ExploitExplore {
        source: TrialId,
        assignment: Assignment,
    },
}

/// The facts a tuner sees when a trial reaches a checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointView<'a> {
    pub trial: TrialId,
    /// Epochs completed by the trial; always a multiple of `step`.
    pub step_index: u32,
    pub metric: f64,
    /// Every trial that has reported at `step_index`, including this one.
    pub population_metrics: &'a [(TrialId, f64)],
    pub order: Order,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TunerError {
    #[error("checkpoint view for {trial} at step {step_index} lacks the trial's own metric")]
    MissingOwnMetric { trial: TrialId, step_index: u32 },
    #[error("no assignment known for exploit source {0}")]
    UnknownSource(TrialId),
}

/// Look up the current assignment of a trial of the same session.
pub type AssignmentLookup<'a> = dyn Fn(TrialId) -> Option<&'a Assignment> + 'a;

/// Population sorted best first; ties broken by trial id ascending.
pub fn rank(population: &[(TrialId, f64)], order: Order) -> Vec<(TrialId, f64)> {
    let mut ranked = population.to_vec();
    ranked.sort_by(|a, b| order.best_first(a.1, b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Median of a non-empty sample; mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn check_view(view: &CheckpointView<'_>) -> Result<(), TunerError> {
    let own = view
        .population_metrics
        .iter()
        .filter(|(id, _)| *id == view.trial)
        .count();
    if own == 1 {
        Ok(())
    } else {
        Err(TunerError::MissingOwnMetric {
            trial: view.trial,
            step_index: view.step_index,
        })
    }
}

/// Median stopping rule: stop a trial strictly worse than the median of
/// everything reported at the same step.
pub fn median_rule(view: &CheckpointView<'_>) -> Result<Decision, TunerError> {
    check_view(view)?;
    let values: Vec<f64> = view.population_metrics.iter().map(|p| p.1).collect();
    let m = median(&values);
    Ok(if view.order.is_better(m, view.metric) {
        Decision::Stop
    } else {
        Decision::Continue
    })
}

/// Size of the top and bottom groups for a population of `n`.
pub fn pbt_quantile_size(quantile: f64, n: usize) -> usize {
    // The small epsilon keeps products like 0.2 * 10 from rounding up past 2.
    let q = (quantile * n as f64 - 1e-9).ceil().max(0.0) as usize;
    q.min(n / 2)
}

/// Truncation exploit plus perturb explore.
pub fn pbt_decision<R: Rng + ?Sized>(
    view: &CheckpointView<'_>,
    config: &PbtConfig,
    space: &HyperparamSpace,
    lookup: &AssignmentLookup<'_>,
    rng: &mut R,
) -> Result<Decision, TunerError> {
    check_view(view)?;
    let ranked = rank(view.population_metrics, view.order);
    let n = ranked.len();
    let q = pbt_quantile_size(config.quantile, n);
    let pos = ranked
        .iter()
        .position(|(id, _)| *id == view.trial)
        .expect("own metric checked above");
    if q == 0 || pos < n - q {
        return Ok(Decision::Continue);
    }
    let source = ranked[rng.random_range(0..q)].0;
    let base = lookup(source).ok_or(TunerError::UnknownSource(source))?;
    let assignment = space.perturb(base, rng, &config.perturb);
    Ok(Decision::ExploitExplore { source, assignment })
}

/// A freshly sampled trial waiting for a GPU, with its Hyperband bracket
/// membership when applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingTrial {
    pub assignment: Assignment,
    pub bracket: Option<BracketTag>,
}

/// Per-session tuner state.
#[derive(Debug, Clone)]
pub enum TunerState {
    RandomSearch,
    Pbt(PbtConfig),
    Hyperband(Hyperband),
}

impl TunerState {
    pub fn new(config: &ChoptConfig) -> Self {
        match config.tune {
            TuneConfig::RandomSearch => TunerState::RandomSearch,
            TuneConfig::Pbt(p) => TunerState::Pbt(p),
            TuneConfig::Hyperband(h) => TunerState::Hyperband(Hyperband::new(
                h,
                config.step.interval().unwrap_or(1),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TunerState::RandomSearch => "random_search",
            TunerState::Pbt(_) => "pbt",
            TunerState::Hyperband(_) => "hyperband",
        }
    }

    /// Initial batch: `population` samples, or the first bracket's trials.
    pub fn init_population<R: Rng + ?Sized>(
        &mut self,
        config: &ChoptConfig,
        rng: &mut R,
    ) -> Vec<PendingTrial> {
        match self {
            TunerState::Hyperband(hb) => hb.next_bracket(&config.space, rng),
            _ => (0..config.population)
                .map(|_| PendingTrial {
                    assignment: config.space.sample(rng),
                    bracket: None,
                })
                .collect(),
        }
    }

    /// More trials once the initial batch is used up.
    pub fn replenish<R: Rng + ?Sized>(
        &mut self,
        space: &HyperparamSpace,
        rng: &mut R,
    ) -> Vec<PendingTrial> {
        match self {
            TunerState::Hyperband(hb) => hb.next_bracket(space, rng),
            _ => vec![PendingTrial {
                assignment: space.sample(rng),
                bracket: None,
            }],
        }
    }

    /// Record that a pending trial became trial `id`.
    pub fn register(&mut self, id: TrialId, bracket: Option<BracketTag>) {
        if let (TunerState::Hyperband(hb), Some(tag)) = (self, bracket) {
            hb.register(id, tag);
        }
    }

    /// Epoch budget of one trial.
    pub fn max_epochs(&self, workload_max: u32) -> u32 {
        match self {
            TunerState::Hyperband(hb) => hb.max_epochs().min(workload_max),
            _ => workload_max,
        }
    }

    pub fn on_checkpoint<R: Rng + ?Sized>(
        &mut self,
        view: &CheckpointView<'_>,
        space: &HyperparamSpace,
        lookup: &AssignmentLookup<'_>,
        rng: &mut R,
    ) -> Result<Decision, TunerError> {
        match self {
            TunerState::RandomSearch => median_rule(view),
            TunerState::Pbt(cfg) => pbt_decision(view, cfg, space, lookup, rng),
            TunerState::Hyperband(hb) => {
                check_view(view)?;
                Ok(hb.on_checkpoint(view))
            }
        }
    }
}

/// Serializable name of a decision, used in logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Continue,
    Stop,
    ExploitExplore,
}

impl Decision {
    pub fn kind(&self) -> DecisionKind {
        match self {
            Decision::Continue => DecisionKind::Continue,
            Decision::Stop => DecisionKind::Stop,
            Decision::ExploitExplore { .. } => DecisionKind::ExploitExplore,
        }
    }
}

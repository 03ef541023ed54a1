//! Deterministic stand-in for real training and for the shared cluster's
//! non-CHOPT load.
//!
//! Workloads are closed-form learning curves. Observation noise is keyed by
//! `(seed, assignment, epoch)` through a cryptographic hash, so the value a
//! trial observes never depends on evaluation order or on which process
//! computes it.

use std::collections::BTreeMap;
use std::io::Read;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::space::{Assignment, ConfigError, HyperparamSpace, Parameters, ParamKind, Distribution};

fn default_d_max() -> f64 {
    140.0
}

fn default_depth_param() -> String {
    "depth".to_string()
}

/// Closed-form learning-curve workload, embedded in a session config under `workload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// Deeper models start slower but reach a higher asymptote.
    DeepBias {
        max_epochs: u32,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_d_max")]
        d_max: f64,
        #[serde(default = "default_depth_param")]
        param: String,
    },
    /// Quadratic bowl around `centers`, scaled by a saturating progress curve.
    Bowl {
        max_epochs: u32,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
        centers: BTreeMap<String, f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("assignment has no numeric value for `{0}`")]
    MissingParam(String),
    #[error("epoch {epoch} outside 1..={max}")]
    EpochOutOfRange { epoch: u32, max: u32 },
}

impl WorkloadSpec {
    pub fn deep_bias(max_epochs: u32, noise_sigma: f64, seed: u64) -> Self {
        WorkloadSpec::DeepBias {
            max_epochs,
            noise_sigma,
            seed,
            d_max: default_d_max(),
            param: default_depth_param(),
        }
    }

    pub fn max_epochs(&self) -> u32 {
        match self {
            WorkloadSpec::DeepBias { max_epochs, .. } | WorkloadSpec::Bowl { max_epochs, .. } => {
                *max_epochs
            }
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        match self {
            WorkloadSpec::DeepBias { noise_sigma, .. } | WorkloadSpec::Bowl { noise_sigma, .. } => {
                *noise_sigma
            }
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            WorkloadSpec::DeepBias { seed, .. } | WorkloadSpec::Bowl { seed, .. } => *seed,
        }
    }

    /// Default workload for a space without one: a bowl centred in the
    /// middle of every numeric dimension, reaching zero at the box corners.
    pub fn default_for(space: &HyperparamSpace) -> Self {
        let mut centers = BTreeMap::new();
        let mut r2 = 0.0;
        for p in space.params() {
            if p.kind == ParamKind::Categorical || !space.is_root(&p.name) {
                continue;
            }
            let (center, half) = match p.parameters {
                Parameters::Range { lo, hi } if p.distribution == Distribution::LogUniform => {
                    let c = (lo * hi).sqrt();
                    (c, (hi - c).max(c - lo))
                }
                Parameters::Range { lo, hi } => ((lo + hi) / 2.0, (hi - lo) / 2.0),
                Parameters::Gaussian { mean, stddev } => (mean, 2.0 * stddev),
                Parameters::Choices(_) => continue,
            };
            centers.insert(p.name.clone(), center);
            r2 += half * half;
        }
        WorkloadSpec::Bowl {
            max_epochs: 100,
            noise_sigma: 0.01,
            seed: 0,
            centers,
            radius: if r2 > 0.0 { r2.sqrt() } else { 1.0 },
        }
    }

    pub fn validate_against(&self, space: &HyperparamSpace) -> Result<(), ConfigError> {
        if self.max_epochs() == 0 {
            return Err(ConfigError::invalid("workload.max_epochs", "must be at least 1"));
        }
        if !(self.noise_sigma() >= 0.0 && self.noise_sigma().is_finite()) {
            return Err(ConfigError::invalid("workload.noise_sigma", "must be >= 0"));
        }
        let numeric_known = |name: &str| {
            space
                .param(name)
                .is_some_and(|p| {
                    space.is_root(name)
                        && (p.kind != ParamKind::Categorical
                            || p.choices().is_some_and(|c| c.iter().all(|v| v.as_f64().is_some())))
                })
                || space.constants().get(name).is_some_and(|v| v.as_f64().is_some())
        };
        match self {
            WorkloadSpec::DeepBias { d_max, param, .. } => {
                if !(d_max.is_finite() && *d_max > 0.0) {
                    return Err(ConfigError::invalid("workload.d_max", "must be positive"));
                }
                if !numeric_known(param) {
                    return Err(ConfigError::invalid(
                        "workload.param",
                        format!("space has no unconditional numeric parameter or constant `{param}`"),
                    ));
                }
            }
            WorkloadSpec::Bowl { centers, radius, .. } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(ConfigError::invalid("workload.radius", "must be positive"));
                }
                if let Some(name) = centers.keys().find(|n| !numeric_known(n)) {
                    return Err(ConfigError::invalid(
                        format!("workload.centers.{name}"),
                        "not a numeric parameter or constant of the space",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Noise-free curve value.
    pub fn mean(&self, a: &Assignment, epoch: u32) -> Result<f64, WorkloadError> {
        let max = self.max_epochs();
        if epoch == 0 || epoch > max {
            return Err(WorkloadError::EpochOutOfRange { epoch, max });
        }
        let t = max as f64;
        let e = epoch as f64;
        match self {
            WorkloadSpec::DeepBias { d_max, param, .. } => {
                let d = a
                    .numeric(param)
                    .ok_or_else(|| WorkloadError::MissingParam(param.clone()))?;
                let asymptote = 0.5 + 0.3 * d / d_max;
                let tau = (t / 4.0) * d / d_max;
                Ok(asymptote * (1.0 - (-e / tau).exp()))
            }
            WorkloadSpec::Bowl { centers, radius, .. } => {
                let mut dist2 = 0.0;
                for (name, c) in centers {
                    let x = a
                        .numeric(name)
                        .ok_or_else(|| WorkloadError::MissingParam(name.clone()))?;
                    dist2 += (x - c) * (x - c);
                }
                Ok((1.0 - dist2 / (radius * radius)) * (1.0 - (-4.0 * e / t).exp()))
            }
        }
    }

    /// Deterministic observation noise for `(seed, assignment, epoch)`.
    pub fn noise(&self, a: &Assignment, epoch: u32) -> f64 {
        let sigma = self.noise_sigma();
        if sigma == 0.0 {
            return 0.0;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed().to_le_bytes());
        hasher.update(a.canonical_json().as_bytes());
        hasher.update(epoch.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    }

    /// Observed metric of `a` after `epoch` epochs.
    pub fn evaluate(&self, a: &Assignment, epoch: u32) -> Result<f64, WorkloadError> {
        let value = self.mean(a, epoch)? + self.noise(a, epoch);
        Ok(match self {
            WorkloadSpec::Bowl { .. } => value.clamp(0.0, 1.0),
            WorkloadSpec::DeepBias { .. } => value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("trace ticks must be strictly increasing (tick {0})")]
    NotIncreasing(u64),
    #[error("demand {gpus} at tick {tick} exceeds capacity {capacity}")]
    OverCapacity { tick: u64, gpus: u32, capacity: u32 },
    #[error("malformed trace: {0}")]
    Malformed(String),
}

/// Piecewise-constant non-CHOPT GPU demand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemandTrace {
    points: Vec<(u64, u32)>,
}

impl DemandTrace {
    pub fn new(points: Vec<(u64, u32)>) -> Result<Self, TraceError> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(TraceError::NotIncreasing(w[1].0));
            }
        }
        Ok(DemandTrace { points })
    }

    pub fn constant(gpus: u32) -> Self {
        DemandTrace {
            points: vec![(0, gpus)],
        }
    }

    pub fn check_capacity(&self, capacity: u32) -> Result<(), TraceError> {
        match self.points.iter().find(|(_, g)| *g > capacity) {
            Some(&(tick, gpus)) => Err(TraceError::OverCapacity {
                tick,
                gpus,
                capacity,
            }),
            None => Ok(()),
        }
    }

    /// Read `tick,non_chopt_gpus` rows (header row required).
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, TraceError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| TraceError::Malformed(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["tick", "non_chopt_gpus"] {
            return Err(TraceError::Malformed(
                "header must be `tick,non_chopt_gpus`".into(),
            ));
        }
        let mut points = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| TraceError::Malformed(e.to_string()))?;
            let parse_err = || TraceError::Malformed(format!("row {}", line + 2));
            let tick = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let gpus = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            points.push((tick, gpus));
        }
        Self::new(points)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tick,non_chopt_gpus\n");
        for (t, g) in &self.points {
            out.push_str(&format!("{t},{g}\n"));
        }
        out
    }

    /// Demand at `tick`: the value of the last point at or before it, 0 before the first.
    pub fn at(&self, tick: u64) -> u32 {
        match self.points.partition_point(|(t, _)| *t <= tick) {
            0 => 0,
            i => self.points[i - 1].1,
        }
    }

    pub fn points(&self) -> &[(u64, u32)] {
        &self.points
    }

    /// Five equal zones shaped like the adaptive-control experiment: moderate
    /// load (A, B), a quiet under-utilized period (C), a spike from other
    /// users (D) and a drain (E). Returns the trace and the zone start ticks.
    pub fn five_zone(capacity: u32, zone_len: u64) -> (Self, [u64; 5]) {
        let frac = [0.40, 0.40, 0.20, 0.75, 0.30];
        let starts = [0, zone_len, 2 * zone_len, 3 * zone_len, 4 * zone_len];
        let points = starts
            .iter()
            .zip(frac)
            .map(|(&t, f)| (t, (capacity as f64 * f).round() as u32))
            .collect();
        (DemandTrace { points }, starts)
    }
}

/// Simulation clock; one tick is one epoch of progress for every live trial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self) -> u64 {
        self.now += 1;
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn depth(d: i64) -> Assignment {
        let mut a = Assignment::new();
        a.insert("depth", d);
        a
    }

    // Independent evaluation of the deep-bias closed form.
    fn deep_bias_oracle(d: f64, epoch: f64) -> f64 {
        let a = 0.5 + 0.3 * d / 140.0;
        let tau = 75.0 * d / 140.0;
        a - a * (-epoch / tau).exp()
    }

    #[test]
    fn deep_bias_closed_form_values() {
        let w = WorkloadSpec::deep_bias(300, 0.0, 0);
        let shallow = w.evaluate(&depth(20), 7).unwrap();
        assert_abs_diff_eq!(shallow, 0.260404, epsilon = 1e-6);
        assert_abs_diff_eq!(shallow, deep_bias_oracle(20.0, 7.0), epsilon = 1e-12);
        let deep = w.evaluate(&depth(140), 7).unwrap();
        assert_abs_diff_eq!(deep, 0.071288, epsilon = 1e-6);
        let deep_final = w.evaluate(&depth(140), 300).unwrap();
        assert_abs_diff_eq!(deep_final, 0.8 * (1.0 - (-4.0f64).exp()), epsilon = 1e-12);
        #[allow(clippy::approx_constant)]
        let reported = 0.7853;
        assert_abs_diff_eq!(deep_final, reported, epsilon = 5e-5);
        assert!(deep_final > 0.5 + 0.3 * 20.0 / 140.0);
    }

    #[test]
    fn deep_bias_crossover_exists_and_persists() {
        let w = WorkloadSpec::deep_bias(300, 0.0, 0);
        let diff = |e| w.evaluate(&depth(140), e).unwrap() - w.evaluate(&depth(20), e).unwrap();
        let crossover = (1..=300).find(|&e| diff(e) > 0.0).expect("deep eventually wins");
        assert!(crossover < 300);
        assert!((crossover..=300).all(|e| diff(e) > 0.0));
    }

    #[test]
    fn bowl_optimum_reaches_saturation_value() {
        let mut centers = BTreeMap::new();
        centers.insert("lr".to_string(), 0.05);
        centers.insert("wd".to_string(), 0.3);
        let w = WorkloadSpec::Bowl {
            max_epochs: 50,
            noise_sigma: 0.0,
            seed: 1,
            centers,
            radius: 0.5,
        };
        let mut a = Assignment::new();
        a.insert("lr", 0.05);
        a.insert("wd", 0.3);
        assert_abs_diff_eq!(w.evaluate(&a, 50).unwrap(), 1.0 - (-4.0f64).exp(), epsilon = 1e-9);
        a.insert("wd", 5.0);
        assert_eq!(w.evaluate(&a, 50).unwrap(), 0.0);
    }

    #[test]
    fn noise_is_pure_and_keyed_by_inputs() {
        let w = WorkloadSpec::deep_bias(300, 0.01, 42);
        let a = depth(92);
        let first = w.evaluate(&a, 10).unwrap();
        assert_eq!(first, w.evaluate(&a, 10).unwrap());
        assert_ne!(first, w.evaluate(&a, 11).unwrap());
        let other_seed = WorkloadSpec::deep_bias(300, 0.01, 43);
        assert_ne!(first, other_seed.evaluate(&a, 10).unwrap());
    }

    #[test]
    fn noise_has_roughly_the_configured_scale() {
        let w = WorkloadSpec::deep_bias(300, 0.01, 7);
        let a = depth(20);
        let samples: Vec<f64> = (1..=300).map(|e| w.noise(&a, e)).collect();
        let mean = samples.iter().sum::<f64>() / 300.0;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 299.0;
        assert!(mean.abs() < 0.003, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 0.0025, "sd {}", var.sqrt());
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        let w = WorkloadSpec::deep_bias(10, 0.0, 0);
        assert_eq!(
            w.evaluate(&Assignment::new(), 1),
            Err(WorkloadError::MissingParam("depth".into()))
        );
        assert!(matches!(
            w.evaluate(&depth(20), 11),
            Err(WorkloadError::EpochOutOfRange { .. })
        ));
        assert!(w.evaluate(&depth(20), 0).is_err());
    }

    #[test]
    fn trace_is_piecewise_constant() {
        let trace = DemandTrace::new(vec![(5, 10), (10, 40)]).unwrap();
        assert_eq!(trace.at(0), 0);
        assert_eq!(trace.at(5), 10);
        assert_eq!(trace.at(9), 10);
        assert_eq!(trace.at(1000), 40);
        assert!(DemandTrace::new(vec![(5, 1), (5, 2)]).is_err());
        assert!(trace.check_capacity(30).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let (trace, _) = DemandTrace::five_zone(100, 20);
        let parsed = DemandTrace::from_csv(trace.to_csv().as_bytes()).unwrap();
        assert_eq!(parsed, trace);
        assert!(DemandTrace::from_csv("t,g\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn clock_advances_by_one() {
        let mut clock = SimClock::default();
        assert_eq!(clock.now(), 0);
        assert_eq!(clock.advance(), 1);
        assert_eq!(clock.advance(), 2);
    }
}

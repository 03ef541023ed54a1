//! Hierarchical hyperparameter spaces: definition, validation, sampling,
//! perturbation and the rerun-time edits (`narrow`, `append_param`).
//!
//! A space is a list of named dimensions plus activation rules. A parameter
//! with no rule is a root and is always present in an [`Assignment`]. A
//! parameter that is the child of one or more rules is present iff at least
//! one of its rules holds: a plain condition holds when its parent is present
//! with one of the listed values, and a conjunction holds when every one of
//! its conditions holds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

mod config;

#[cfg(test)]
pub(crate) use config::tests::LISTING;

pub(crate) use config::{parse_condition, parse_param, parse_termination, parse_tune};

pub use config::{
    parse_config, CheckpointStep, ChoptConfig, Exploit, Explore, HyperbandConfig, Order,
    PbtConfig, Termination, TuneConfig,
};

/// Default probability that `perturb` resamples a categorical value.
pub const DEFAULT_RESAMPLE_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, when the error is a validation error.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Parse { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Float,
    Int,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Uniform,
    LogUniform,
    Gaussian,
    Categorical,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::LogUniform => "log_uniform",
            Distribution::Gaussian => "gaussian",
            Distribution::Categorical => "categorical",
        }
    }
}

/// A concrete hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(x) => Some(*x),
            Value::Str(_) => None,
        }
    }

    /// Semantic equality: numbers compare by value regardless of int/float form.
    pub fn matches(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Str(_), _) | (_, Value::Str(_)) => false,
            (a, b) => a.as_f64() == b.as_f64(),
        }
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("values are always representable as JSON")
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

/// Initial sampling parameters of a dimension. Which variant is valid
/// depends on the distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Parameters {
    Range { lo: f64, hi: f64 },
    Gaussian { mean: f64, stddev: f64 },
    Choices(Vec<Value>),
}

impl Parameters {
    pub(crate) fn to_json(&self) -> serde_json::Value {
        match self {
            Parameters::Range { lo, hi } => serde_json::json!([lo, hi]),
            Parameters::Gaussian { mean, stddev } => serde_json::json!([mean, stddev]),
            Parameters::Choices(values) => {
                serde_json::Value::Array(values.iter().map(Value::to_json).collect())
            }
        }
    }

    /// Interpret a JSON array for the given distribution.
    pub(crate) fn from_json(
        distribution: Distribution,
        raw: &serde_json::Value,
        field: &str,
    ) -> Result<Self, ConfigError> {
        let items = raw
            .as_array()
            .ok_or_else(|| ConfigError::invalid(field, "must be a list"))?;
        match distribution {
            Distribution::Categorical => {
                let mut values = Vec::with_capacity(items.len());
                for item in items {
                    let value: Value = serde_json::from_value(item.clone()).map_err(|_| {
                        ConfigError::invalid(field, "categories must be strings or numbers")
                    })?;
                    values.push(value);
                }
                Ok(Parameters::Choices(values))
            }
            _ => {
                let nums: Option<Vec<f64>> = items.iter().map(|v| v.as_f64()).collect();
                match nums.as_deref() {
                    Some([a, b]) if distribution == Distribution::Gaussian => {
                        Ok(Parameters::Gaussian {
                            mean: *a,
                            stddev: *b,
                        })
                    }
                    Some([a, b]) => Ok(Parameters::Range { lo: *a, hi: *b }),
                    _ => Err(ConfigError::invalid(field, "must be a list of two numbers")),
                }
            }
        }
    }
}

/// One tunable dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub distribution: Distribution,
    pub parameters: Parameters,
    /// Hard clamp bounds; `None` for categorical dimensions.
    pub p_range: Option<(f64, f64)>,
}

fn is_integral(x: f64) -> bool {
    x.is_finite() && x.fract() == 0.0
}

impl ParamSpec {
    pub fn float_uniform(name: &str, lo: f64, hi: f64, p_range: Option<(f64, f64)>) -> Self {
        Self::numeric(name, ParamKind::Float, Distribution::Uniform, lo, hi, p_range)
    }

    pub fn float_log_uniform(name: &str, lo: f64, hi: f64, p_range: Option<(f64, f64)>) -> Self {
        Self::numeric(name, ParamKind::Float, Distribution::LogUniform, lo, hi, p_range)
    }

    pub fn int_uniform(name: &str, lo: i64, hi: i64, p_range: Option<(i64, i64)>) -> Self {
        Self::numeric(
            name,
            ParamKind::Int,
            Distribution::Uniform,
            lo as f64,
            hi as f64,
            p_range.map(|(a, b)| (a as f64, b as f64)),
        )
    }

    pub fn gaussian(name: &str, mean: f64, stddev: f64, p_range: Option<(f64, f64)>) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind: ParamKind::Float,
            distribution: Distribution::Gaussian,
            parameters: Parameters::Gaussian { mean, stddev },
            p_range,
        }
    }

    pub fn categorical<V: Into<Value>>(name: &str, values: impl IntoIterator<Item = V>) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind: ParamKind::Categorical,
            distribution: Distribution::Categorical,
            parameters: Parameters::Choices(values.into_iter().map(Into::into).collect()),
            p_range: None,
        }
    }

    fn numeric(
        name: &str,
        kind: ParamKind,
        distribution: Distribution,
        lo: f64,
        hi: f64,
        p_range: Option<(f64, f64)>,
    ) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind,
            distribution,
            parameters: Parameters::Range { lo, hi },
            p_range,
        }
    }

    pub fn choices(&self) -> Option<&[Value]> {
        match &self.parameters {
            Parameters::Choices(values) => Some(values),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let base = format!("h_params.{}", self.name);
        if self.name.is_empty() {
            return Err(ConfigError::invalid("h_params", "parameter names must be non-empty"));
        }
        let categorical_kind = self.kind == ParamKind::Categorical;
        let categorical_dist = self.distribution == Distribution::Categorical;
        if categorical_kind != categorical_dist {
            return Err(ConfigError::invalid(
                format!("{base}.type"),
                format!(
                    "type `{}` is incompatible with distribution `{}`",
                    kind_token(self.kind),
                    self.distribution.as_str()
                ),
            ));
        }

        if let Some((lo, hi)) = self.p_range {
            if categorical_kind {
                return Err(ConfigError::invalid(
                    format!("{base}.p_range"),
                    "must be empty for categorical parameters",
                ));
            }
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(ConfigError::invalid(
                    format!("{base}.p_range"),
                    "must be [lo, hi] with lo < hi",
                ));
            }
            if self.kind == ParamKind::Int && !(is_integral(lo) && is_integral(hi)) {
                return Err(ConfigError::invalid(
                    format!("{base}.p_range"),
                    "bounds of an int parameter must be integers",
                ));
            }
        }

        let field = format!("{base}.parameters");
        match (&self.parameters, self.distribution) {
            (Parameters::Choices(values), Distribution::Categorical) => {
                if values.is_empty() {
                    return Err(ConfigError::invalid(field, "category list must be non-empty"));
                }
                for (i, v) in values.iter().enumerate() {
                    if values[..i].iter().any(|w| w.matches(v)) {
                        return Err(ConfigError::invalid(
                            field,
                            format!("duplicate category `{v}`"),
                        ));
                    }
                }
            }
            (Parameters::Range { lo, hi }, Distribution::Uniform | Distribution::LogUniform) => {
                let (lo, hi) = (*lo, *hi);
                if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                    return Err(ConfigError::invalid(field, "must be [lo, hi] with lo < hi"));
                }
                if self.distribution == Distribution::LogUniform && lo <= 0.0 {
                    return Err(ConfigError::invalid(field, "log_uniform requires lo > 0"));
                }
                if self.kind == ParamKind::Int && !(is_integral(lo) && is_integral(hi)) {
                    return Err(ConfigError::invalid(
                        field,
                        "bounds of an int parameter must be integers",
                    ));
                }
                if let Some((plo, phi)) = self.p_range {
                    if lo < plo || hi > phi {
                        return Err(ConfigError::invalid(
                            field,
                            format!("[{lo}, {hi}] must lie within p_range [{plo}, {phi}]"),
                        ));
                    }
                }
            }
            (Parameters::Gaussian { mean, stddev }, Distribution::Gaussian) => {
                if !mean.is_finite() || !stddev.is_finite() || *stddev <= 0.0 {
                    return Err(ConfigError::invalid(
                        field,
                        "must be [mean, stddev] with stddev > 0",
                    ));
                }
                if let Some((plo, phi)) = self.p_range {
                    if *mean < plo || *mean > phi {
                        return Err(ConfigError::invalid(field, "mean must lie within p_range"));
                    }
                }
            }
            _ => {
                return Err(ConfigError::invalid(
                    field,
                    format!("does not fit distribution `{}`", self.distribution.as_str()),
                ))
            }
        }
        Ok(())
    }

    /// Clamp a numeric value into `p_range` (no-op without a range).
    pub fn clamp(&self, x: f64) -> f64 {
        match self.p_range {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x,
        }
    }

    fn numeric_value(&self, x: f64) -> Value {
        match self.kind {
            ParamKind::Int => Value::Int(self.clamp(x.round()) as i64),
            _ => Value::Float(self.clamp(x)),
        }
    }

    /// Draw a value from the initial sampling distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match &self.parameters {
            Parameters::Choices(values) => values
                .choose(rng)
                .cloned()
                .expect("validated category lists are non-empty"),
            Parameters::Range { lo, hi } => match (self.kind, self.distribution) {
                (ParamKind::Int, Distribution::Uniform) => {
                    let v = rng.random_range(*lo as i64..=*hi as i64);
                    self.numeric_value(v as f64)
                }
                (_, Distribution::LogUniform) => {
                    let u: f64 = rng.random();
                    self.numeric_value(log_uniform_from_unit(*lo, *hi, u))
                }
                _ => {
                    let u: f64 = rng.random();
                    self.numeric_value(lo + u * (hi - lo))
                }
            },
            Parameters::Gaussian { mean, stddev } => {
                let normal = Normal::new(*mean, *stddev).expect("validated stddev is positive");
                self.numeric_value(normal.sample(rng))
            }
        }
    }

    /// Scale a numeric value by `factor`, round ints half away from zero, clamp
    /// into `p_range`. Categorical values are returned unchanged.
    pub fn perturb_value(&self, value: &Value, factor: f64) -> Value {
        match (self.kind, value.as_f64()) {
            (ParamKind::Categorical, _) | (_, None) => value.clone(),
            (_, Some(x)) => self.numeric_value(x * factor),
        }
    }

    /// Whether `value` is admissible for this dimension.
    pub fn admits(&self, value: &Value) -> bool {
        match self.kind {
            ParamKind::Categorical => self
                .choices()
                .is_some_and(|c| c.iter().any(|v| v.matches(value))),
            ParamKind::Int => match value {
                Value::Int(i) => self.in_range(*i as f64),
                _ => false,
            },
            ParamKind::Float => match value {
                Value::Float(x) => x.is_finite() && self.in_range(*x),
                _ => false,
            },
        }
    }

    fn in_range(&self, x: f64) -> bool {
        self.p_range.is_none_or(|(lo, hi)| lo <= x && x <= hi)
    }
}

pub(crate) fn kind_token(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Float => "float",
        ParamKind::Int => "int",
        ParamKind::Categorical => "categorical",
    }
}

/// Inverse-CDF mapping of a unit-interval draw onto a log-uniform range.
pub fn log_uniform_from_unit(lo: f64, hi: f64, u: f64) -> f64 {
    (u * (hi.ln() - lo.ln()) + lo.ln()).exp()
}

/// Activation condition: `child` is active when `parent` takes one of `parent_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub child: String,
    pub parent: String,
    pub parent_values: Vec<Value>,
}

impl Condition {
    pub fn new<V: Into<Value>>(
        child: &str,
        parent: &str,
        values: impl IntoIterator<Item = V>,
    ) -> Self {
        Condition {
            child: child.to_string(),
            parent: parent.to_string(),
            parent_values: values.into_iter().map(Into::into).collect(),
        }
    }

    fn holds(&self, partial: &Assignment) -> bool {
        partial
            .get(&self.parent)
            .is_some_and(|v| self.parent_values.iter().any(|p| p.matches(v)))
    }
}

/// Map from parameter name to value; only active parameters are present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(BTreeMap<String, Value>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn numeric(&self, name: &str) -> Option<f64> {
        self.0.get(name).and_then(Value::as_f64)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.0.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    /// Canonical, order-stable JSON text; used as a hashing key.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.0).expect("assignments serialize")
    }
}

impl FromIterator<(String, Value)> for Assignment {
    fn from_iter<I: IntoIterator<Item = (String, Value)>>(iter: I) -> Self {
        Assignment(iter.into_iter().collect())
    }
}

/// Multiplicative perturbation settings used by the PBT explore step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSettings {
    pub low: f64,
    pub high: f64,
    pub resample_probability: f64,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        PerturbSettings {
            low: 0.8,
            high: 1.2,
            resample_probability: DEFAULT_RESAMPLE_PROBABILITY,
        }
    }
}

/// A validated hyperparameter space. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperparamSpace {
    params: Vec<ParamSpec>,
    conditions: Vec<Condition>,
    conjunctions: Vec<Vec<Condition>>,
    constants: BTreeMap<String, Value>,
    /// Indices into `params`, parents before children.
    order: Vec<usize>,
}

impl HyperparamSpace {
    pub fn new(
        params: Vec<ParamSpec>,
        conditions: Vec<Condition>,
        conjunctions: Vec<Vec<Condition>>,
        constants: BTreeMap<String, Value>,
    ) -> Result<Self, ConfigError> {
        if params.is_empty() {
            return Err(ConfigError::invalid("h_params", "at least one parameter is required"));
        }
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            p.validate()?;
            if index.insert(p.name.as_str(), i).is_some() {
                return Err(ConfigError::invalid(
                    format!("h_params.{}", p.name),
                    "duplicate parameter name",
                ));
            }
        }
        for name in constants.keys() {
            if index.contains_key(name.as_str()) {
                return Err(ConfigError::invalid(
                    format!("h_params_constants.{name}"),
                    "a constant cannot also be a tuned parameter",
                ));
            }
        }

        let check = |c: &Condition, field: String| -> Result<(), ConfigError> {
            let child = index
                .get(c.child.as_str())
                .ok_or_else(|| ConfigError::invalid(format!("{field}.child"), format!("unknown parameter `{}`", c.child)))?;
            let parent = index
                .get(c.parent.as_str())
                .ok_or_else(|| ConfigError::invalid(format!("{field}.parent"), format!("unknown parameter `{}`", c.parent)))?;
            if child == parent {
                return Err(ConfigError::invalid(field, "child and parent must differ"));
            }
            if c.parent_values.is_empty() {
                return Err(ConfigError::invalid(
                    format!("{field}.parent_values"),
                    "must list at least one value",
                ));
            }
            let parent_spec = &params[*parent];
            if let Some(choices) = parent_spec.choices() {
                if let Some(bad) = c
                    .parent_values
                    .iter()
                    .find(|v| !choices.iter().any(|w| w.matches(v)))
                {
                    return Err(ConfigError::invalid(
                        format!("{field}.parent_values"),
                        format!("`{bad}` is not a category of `{}`", c.parent),
                    ));
                }
            }
            Ok(())
        };

        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (i, c) in conditions.iter().enumerate() {
            check(c, format!("h_params_conditions[{i}]"))?;
            edges.push((index[c.parent.as_str()], index[c.child.as_str()]));
        }
        for (i, group) in conjunctions.iter().enumerate() {
            let field = format!("h_params_conjunctions[{i}]");
            let first = group
                .first()
                .ok_or_else(|| ConfigError::invalid(&field, "a conjunction must not be empty"))?;
            for (j, c) in group.iter().enumerate() {
                check(c, format!("{field}[{j}]"))?;
                if c.child != first.child {
                    return Err(ConfigError::invalid(
                        format!("{field}[{j}].child"),
                        "all conditions of a conjunction must share one child",
                    ));
                }
                edges.push((index[c.parent.as_str()], index[c.child.as_str()]));
            }
        }

        let order = topological_order(params.len(), &edges).ok_or_else(|| {
            let field = if conditions.is_empty() {
                "h_params_conjunctions"
            } else {
                "h_params_conditions"
            };
            ConfigError::invalid(field, "conditions form a cycle")
        })?;

        Ok(HyperparamSpace {
            params,
            conditions,
            conjunctions,
            constants,
            order,
        })
    }

    /// Space without conditions or constants.
    pub fn flat(params: Vec<ParamSpec>) -> Result<Self, ConfigError> {
        Self::new(params, Vec::new(), Vec::new(), BTreeMap::new())
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn conjunctions(&self) -> &[Vec<Condition>] {
        &self.conjunctions
    }

    /// Values held fixed (not tuned) in this space.
    pub fn constants(&self) -> &BTreeMap<String, Value> {
        &self.constants
    }

    pub fn with_constants(mut self, constants: BTreeMap<String, Value>) -> Result<Self, ConfigError> {
        self.constants = constants;
        Self::new(self.params, self.conditions, self.conjunctions, self.constants)
    }

    /// Whether `name` is unconditionally active.
    pub fn is_root(&self, name: &str) -> bool {
        !self.conditions.iter().any(|c| c.child == name)
            && !self.conjunctions.iter().any(|g| g[0].child == name)
    }

    /// Whether `name` is active given the (partial) assignment of its ancestors.
    pub fn is_active(&self, name: &str, partial: &Assignment) -> bool {
        if self.is_root(name) {
            return true;
        }
        self.conditions
            .iter()
            .filter(|c| c.child == name)
            .any(|c| c.holds(partial))
            || self
                .conjunctions
                .iter()
                .filter(|g| g[0].child == name)
                .any(|g| g.iter().all(|c| c.holds(partial)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        let mut out = Assignment::new();
        for &i in &self.order {
            let spec = &self.params[i];
            if self.is_active(&spec.name, &out) {
                out.insert(spec.name.clone(), spec.sample(rng));
            }
        }
        out
    }

    /// PBT explore step: numeric values scaled by a factor drawn from
    /// `{low, high}`, categorical values resampled with a small probability.
    /// Children whose activation changes are dropped or freshly sampled.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        assignment: &Assignment,
        rng: &mut R,
        settings: &PerturbSettings,
    ) -> Assignment {
        let mut out = Assignment::new();
        for &i in &self.order {
            let spec = &self.params[i];
            if !self.is_active(&spec.name, &out) {
                continue;
            }
            let value = match assignment.get(&spec.name) {
                Some(v) if spec.kind == ParamKind::Categorical => {
                    if rng.random_bool(settings.resample_probability) {
                        spec.sample(rng)
                    } else {
                        v.clone()
                    }
                }
                Some(v) => {
                    let factor = if rng.random_bool(0.5) {
                        settings.low
                    } else {
                        settings.high
                    };
                    spec.perturb_value(v, factor)
                }
                None => spec.sample(rng),
            };
            out.insert(spec.name.clone(), value);
        }
        out
    }

    /// Return a copy with the initial sampling parameters of some dimensions replaced.
    pub fn narrow(&self, overrides: &BTreeMap<String, Parameters>) -> Result<Self, ConfigError> {
        let mut params = self.params.clone();
        for (name, parameters) in overrides {
            let spec = params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| {
                    ConfigError::invalid(format!("h_params.{name}"), "no such parameter to narrow")
                })?;
            spec.parameters = parameters.clone();
        }
        Self::new(
            params,
            self.conditions.clone(),
            self.conjunctions.clone(),
            self.constants.clone(),
        )
    }

    /// Add a new tuned dimension. A constant of the same name is retired.
    pub fn append_param(&self, spec: ParamSpec, conditions: Vec<Condition>) -> Result<Self, ConfigError> {
        if self.param(&spec.name).is_some() {
            return Err(ConfigError::invalid(
                format!("h_params.{}", spec.name),
                "parameter already exists",
            ));
        }
        if let Some(c) = conditions.iter().find(|c| c.child != spec.name) {
            return Err(ConfigError::invalid(
                "h_params_conditions",
                format!("appended condition must target `{}`, not `{}`", spec.name, c.child),
            ));
        }
        let mut constants = self.constants.clone();
        constants.remove(&spec.name);
        let mut params = self.params.clone();
        params.push(spec);
        let mut all_conditions = self.conditions.clone();
        all_conditions.extend(conditions);
        Self::new(params, all_conditions, self.conjunctions.clone(), constants)
    }

    /// Check the assignment invariants: membership, ranges and conditional presence.
    pub fn check_assignment(&self, a: &Assignment) -> Result<(), String> {
        for (name, _) in a.iter() {
            if self.param(name).is_none() {
                return Err(format!("`{name}` is not a parameter of the space"));
            }
        }
        for &i in &self.order {
            let spec = &self.params[i];
            let active = self.is_active(&spec.name, a);
            match (active, a.get(&spec.name)) {
                (true, None) => return Err(format!("active parameter `{}` missing", spec.name)),
                (false, Some(_)) => return Err(format!("inactive parameter `{}` present", spec.name)),
                (true, Some(v)) if !spec.admits(v) => {
                    return Err(format!("`{}` = {v} is not admissible", spec.name))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Assignment with constants filled in for every name not tuned.
    pub fn effective(&self, a: &Assignment) -> Assignment {
        let mut out = a.clone();
        for (k, v) in &self.constants {
            if !out.contains(k) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}

fn topological_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    let mut children: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(parent, child) in edges {
        if children[parent].insert(child) {
            indegree[child] += 1;
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lr() -> ParamSpec {
        ParamSpec::float_log_uniform("lr", 0.01, 0.09, Some((0.001, 0.1)))
    }

    fn optimizer_space() -> HyperparamSpace {
        HyperparamSpace::new(
            vec![
                ParamSpec::categorical("optimizer", ["sgd", "adam"]),
                ParamSpec::float_uniform("momentum", 0.1, 0.999, Some((0.0, 1.0))),
                lr(),
            ],
            vec![Condition::new("momentum", "optimizer", ["sgd"])],
            vec![],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn log_uniform_maps_unit_interval_endpoints_and_midpoint() {
        assert_relative_eq!(log_uniform_from_unit(0.01, 0.09, 0.0), 0.01, max_relative = 1e-12);
        assert_relative_eq!(log_uniform_from_unit(0.01, 0.09, 0.5), 0.03, max_relative = 1e-12);
        assert_relative_eq!(log_uniform_from_unit(0.01, 0.09, 1.0), 0.09, max_relative = 1e-12);
    }

    #[test]
    fn inactive_child_is_absent() {
        let space = optimizer_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_adam = false;
        for _ in 0..200 {
            let a = space.sample(&mut rng);
            space.check_assignment(&a).unwrap();
            if a.get("optimizer") == Some(&Value::from("adam")) {
                saw_adam = true;
                assert!(!a.contains("momentum"));
            } else {
                assert!(a.contains("momentum"));
            }
        }
        assert!(saw_adam);
    }

    #[test]
    fn perturb_value_scales_and_clamps() {
        let spec = ParamSpec::float_log_uniform("lr", 0.01, 0.09, Some((0.001, 0.1)));
        let v = spec.perturb_value(&Value::Float(0.05), 1.2);
        assert_relative_eq!(v.as_f64().unwrap(), 0.06, max_relative = 1e-12);
        assert_eq!(spec.perturb_value(&Value::Float(0.09), 1.2), Value::Float(0.1));
    }

    #[test]
    fn perturb_value_rounds_ints_half_away_from_zero() {
        let depth = ParamSpec::int_uniform("depth", 1, 20, Some((1, 20)));
        assert_eq!(depth.perturb_value(&Value::Int(9), 0.8), Value::Int(7));
        // 5 * 0.9 = 4.5 rounds up, not to even
        assert_eq!(depth.perturb_value(&Value::Int(5), 0.9), Value::Int(5));
        assert_eq!(depth.perturb_value(&Value::Int(15), 1.5), Value::Int(20));
    }

    #[test]
    fn perturb_keeps_conditional_presence_consistent() {
        let space = optimizer_space();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let settings = PerturbSettings {
            resample_probability: 0.5,
            ..PerturbSettings::default()
        };
        let mut a = space.sample(&mut rng);
        for _ in 0..500 {
            a = space.perturb(&a, &mut rng, &settings);
            space.check_assignment(&a).unwrap();
        }
    }

    #[test]
    fn narrow_replaces_only_overridden_parameters() {
        let space = HyperparamSpace::flat(vec![
            ParamSpec::float_uniform("lr", 0.001, 0.2, Some((0.001, 0.2))),
            ParamSpec::float_uniform("prob", 0.0, 0.9, Some((0.0, 1.0))),
        ])
        .unwrap();
        let mut overrides = BTreeMap::new();
        overrides.insert("lr".to_string(), Parameters::Range { lo: 0.0334, hi: 0.0868 });
        let narrowed = space.narrow(&overrides).unwrap();
        assert_eq!(
            narrowed.param("lr").unwrap().parameters,
            Parameters::Range { lo: 0.0334, hi: 0.0868 }
        );
        assert_eq!(narrowed.param("prob"), space.param("prob"));
        assert_eq!(space.param("lr").unwrap().parameters, Parameters::Range { lo: 0.001, hi: 0.2 });
        assert_eq!(space.narrow(&BTreeMap::new()).unwrap(), space);
    }

    #[test]
    fn narrow_outside_p_range_is_rejected() {
        let space = HyperparamSpace::flat(vec![lr()]).unwrap();
        let mut overrides = BTreeMap::new();
        overrides.insert("lr".to_string(), Parameters::Range { lo: 0.0001, hi: 0.01 });
        let err = space.narrow(&overrides).unwrap_err();
        assert_eq!(err.field(), Some("h_params.lr.parameters"));
        overrides.clear();
        overrides.insert("nope".to_string(), Parameters::Range { lo: 0.1, hi: 0.2 });
        assert_eq!(space.narrow(&overrides).unwrap_err().field(), Some("h_params.nope"));
    }

    #[test]
    fn append_param_retires_constant_and_rejects_duplicates() {
        let mut constants = BTreeMap::new();
        constants.insert("momentum".to_string(), Value::Float(0.9));
        let space = HyperparamSpace::new(vec![lr()], vec![], vec![], constants).unwrap();
        let grown = space
            .append_param(ParamSpec::float_uniform("momentum", 0.1, 0.999, None), vec![])
            .unwrap();
        assert!(grown.param("momentum").is_some());
        assert!(grown.constants().is_empty());
        let err = grown.append_param(lr(), vec![]).unwrap_err();
        assert_eq!(err.field(), Some("h_params.lr"));
    }

    #[test]
    fn append_param_with_dangling_parent_is_rejected() {
        let space = HyperparamSpace::flat(vec![lr()]).unwrap();
        let err = space
            .append_param(
                ParamSpec::float_uniform("momentum", 0.1, 0.999, None),
                vec![Condition::new("momentum", "optimizer", ["sgd"])],
            )
            .unwrap_err();
        assert_eq!(err.field(), Some("h_params_conditions[0].parent"));
    }

    #[test]
    fn cyclic_conditions_are_rejected() {
        let err = HyperparamSpace::new(
            vec![
                ParamSpec::categorical("a", ["x", "y"]),
                ParamSpec::categorical("b", ["x", "y"]),
            ],
            vec![Condition::new("a", "b", ["x"]), Condition::new("b", "a", ["x"])],
            vec![],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert_eq!(err.field(), Some("h_params_conditions"));
    }

    #[test]
    fn conjunction_requires_every_condition() {
        let space = HyperparamSpace::new(
            vec![
                ParamSpec::categorical("optimizer", ["sgd", "adam"]),
                ParamSpec::categorical("nesterov", ["on", "off"]),
                ParamSpec::float_uniform("momentum", 0.1, 0.9, None),
            ],
            vec![],
            vec![vec![
                Condition::new("momentum", "optimizer", ["sgd"]),
                Condition::new("momentum", "nesterov", ["on"]),
            ]],
            BTreeMap::new(),
        )
        .unwrap();
        let mut a = Assignment::new();
        a.insert("optimizer", "sgd");
        a.insert("nesterov", "off");
        assert!(!space.is_active("momentum", &a));
        a.insert("nesterov", "on");
        assert!(space.is_active("momentum", &a));
    }

    #[test]
    fn gaussian_samples_are_clamped() {
        let spec = ParamSpec::gaussian("wd", 0.0, 10.0, Some((-0.5, 0.5)));
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = spec.sample(&mut rng).as_f64().unwrap();
            assert!((-0.5..=0.5).contains(&x));
        }
    }

    #[test]
    fn categorical_with_int_type_is_rejected() {
        let mut spec = ParamSpec::categorical("depth", [20i64, 92]);
        spec.kind = ParamKind::Int;
        assert_eq!(spec.validate().unwrap_err().field(), Some("h_params.depth.type"));
    }
}

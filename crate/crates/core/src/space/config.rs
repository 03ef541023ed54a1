//! Session configuration documents.
//!
//! The canonical format is strict JSON with the field names of the classic
//! dictionary layout (`h_params`, `measure`, `order`, `step`, ...). Parsing
//! walks the document by hand so that every validation failure names the
//! dotted path of the offending field.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value as Json};

use super::{
    kind_token, Condition, ConfigError, Distribution, HyperparamSpace, ParamKind, ParamSpec,
    Parameters, PerturbSettings, Value,
};
use crate::simcluster::WorkloadSpec;

const TOP_LEVEL_KEYS: &[&str] = &[
    "h_params",
    "h_params_conditions",
    "h_params_conjunctions",
    "h_params_constants",
    "measure",
    "order",
    "step",
    "population",
    "tune",
    "termination",
    "stop_ratio",
    "seed",
    "workload",
];

/// Optimization direction. `Descending` maximizes the measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Descending,
    Ascending,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::Descending => "descending",
            Order::Ascending => "ascending",
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn is_better(self, a: f64, b: f64) -> bool {
        match self {
            Order::Descending => a > b,
            Order::Ascending => a < b,
        }
    }

    /// Total order placing the best metric first; NaN sorts last.
    pub fn best_first(self, a: f64, b: f64) -> Ordering {
        match (a.is_nan(), b.is_nan()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => match self {
                Order::Descending => b.total_cmp(&a),
                Order::Ascending => a.total_cmp(&b),
            },
        }
    }

    /// Whether `value` has reached `threshold` in this direction.
    pub fn reaches(self, value: f64, threshold: f64) -> bool {
        match self {
            Order::Descending => value >= threshold,
            Order::Ascending => value <= threshold,
        }
    }
}

/// Checkpoint interval in epochs. `Disabled` corresponds to `step: -1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointStep {
    Disabled,
    Every(u32),
}

impl CheckpointStep {
    pub fn interval(self) -> Option<u32> {
        match self {
            CheckpointStep::Disabled => None,
            CheckpointStep::Every(n) => Some(n),
        }
    }

    pub fn early_stopping_enabled(self) -> bool {
        matches!(self, CheckpointStep::Every(_))
    }

    /// Whether a trial that has completed `epoch` epochs sits on a checkpoint.
    pub fn is_checkpoint(self, epoch: u32) -> bool {
        match self {
            CheckpointStep::Every(n) => epoch > 0 && epoch.is_multiple_of(n),
            CheckpointStep::Disabled => false,
        }
    }

    fn to_json(self) -> Json {
        match self {
            CheckpointStep::Disabled => json!(-1),
            CheckpointStep::Every(n) => json!(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploit {
    Truncation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Explore {
    Perturb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbtConfig {
    pub exploit: Exploit,
    pub explore: Explore,
    /// Fraction of the population forming the top and bottom groups.
    pub quantile: f64,
    pub perturb: PerturbSettings,
}

impl Default for PbtConfig {
    fn default() -> Self {
        PbtConfig {
            exploit: Exploit::Truncation,
            explore: Explore::Perturb,
            quantile: 0.2,
            perturb: PerturbSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperbandConfig {
    /// Maximum resource per trial, in checkpoints of `step` epochs.
    pub resource_limit: u32,
    pub eta: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TuneConfig {
    /// Random search; median early stopping at every checkpoint unless `step` is -1.
    RandomSearch,
    Pbt(PbtConfig),
    Hyperband(HyperbandConfig),
}

impl TuneConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TuneConfig::RandomSearch => "random_search",
            TuneConfig::Pbt(_) => "pbt",
            TuneConfig::Hyperband(_) => "hyperband",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Termination {
    /// Budget in simulated ticks since the session started.
    pub time: Option<u64>,
    pub max_session_number: Option<u64>,
    pub performance_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoptConfig {
    pub space: HyperparamSpace,
    pub measure: String,
    pub order: Order,
    pub step: CheckpointStep,
    pub population: u32,
    pub tune: TuneConfig,
    pub termination: Termination,
    pub stop_ratio: f64,
    pub seed: Option<u64>,
    pub workload: Option<WorkloadSpec>,
}

pub const DEFAULT_STOP_RATIO: f64 = 0.5;
pub const DEFAULT_HYPERBAND_ETA: u32 = 3;

/// Parse and validate a configuration document.
pub fn parse_config(text: &[u8]) -> Result<ChoptConfig, ConfigError> {
    let doc: Json = serde_json::from_slice(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    ChoptConfig::from_json(&doc)
}

fn obj<'a>(v: &'a Json, field: &str) -> Result<&'a Map<String, Json>, ConfigError> {
    v.as_object()
        .ok_or_else(|| ConfigError::invalid(field, "must be an object"))
}

fn reject_unknown(map: &Map<String, Json>, allowed: &[&str], prefix: &str) -> Result<(), ConfigError> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => {
            let field = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            Err(ConfigError::invalid(field, "unknown field"))
        }
        None => Ok(()),
    }
}

fn required<'a>(map: &'a Map<String, Json>, key: &str, field: &str) -> Result<&'a Json, ConfigError> {
    map.get(key)
        .ok_or_else(|| ConfigError::invalid(field, "is required"))
}

fn as_str<'a>(v: &'a Json, field: &str) -> Result<&'a str, ConfigError> {
    v.as_str()
        .ok_or_else(|| ConfigError::invalid(field, "must be a string"))
}

fn as_u64(v: &Json, field: &str) -> Result<u64, ConfigError> {
    v.as_u64()
        .ok_or_else(|| ConfigError::invalid(field, "must be a non-negative integer"))
}

fn as_f64(v: &Json, field: &str) -> Result<f64, ConfigError> {
    v.as_f64()
        .ok_or_else(|| ConfigError::invalid(field, "must be a number"))
}

pub(crate) fn parse_param(name: &str, raw: &Json) -> Result<ParamSpec, ConfigError> {
    let base = format!("h_params.{name}");
    let map = obj(raw, &base)?;
    reject_unknown(map, &["parameters", "distribution", "type", "p_range"], &base)?;

    let dist_field = format!("{base}.distribution");
    let distribution = match as_str(required(map, "distribution", &dist_field)?, &dist_field)? {
        "uniform" => Distribution::Uniform,
        "log_uniform" => Distribution::LogUniform,
        "gaussian" => Distribution::Gaussian,
        "categorical" => Distribution::Categorical,
        other => {
            return Err(ConfigError::invalid(
                dist_field,
                format!("unknown distribution `{other}`"),
            ))
        }
    };

    let type_field = format!("{base}.type");
    let kind = match as_str(required(map, "type", &type_field)?, &type_field)? {
        "float" => ParamKind::Float,
        "int" => ParamKind::Int,
        "str" | "categorical" => ParamKind::Categorical,
        other => return Err(ConfigError::invalid(type_field, format!("unknown type `{other}`"))),
    };

    let params_field = format!("{base}.parameters");
    let parameters =
        Parameters::from_json(distribution, required(map, "parameters", &params_field)?, &params_field)?;

    let range_field = format!("{base}.p_range");
    let p_range = match map.get("p_range") {
        None | Some(Json::Null) => None,
        Some(Json::Array(items)) if items.is_empty() => None,
        Some(Json::Array(items)) => match items.as_slice() {
            [a, b] => Some((as_f64(a, &range_field)?, as_f64(b, &range_field)?)),
            _ => return Err(ConfigError::invalid(range_field, "must be [] or [lo, hi]")),
        },
        Some(_) => return Err(ConfigError::invalid(range_field, "must be [] or [lo, hi]")),
    };

    let spec = ParamSpec {
        name: name.to_string(),
        kind,
        distribution,
        parameters,
        p_range,
    };
    spec.validate()?;
    Ok(spec)
}

pub(crate) fn parse_condition(raw: &Json, field: &str) -> Result<Condition, ConfigError> {
    serde_json::from_value(raw.clone()).map_err(|e| {
        ConfigError::invalid(
            field,
            format!("expected {{child, parent, parent_values}}: {e}"),
        )
    })
}

fn parse_space(map: &Map<String, Json>) -> Result<HyperparamSpace, ConfigError> {
    let h_params = obj(required(map, "h_params", "h_params")?, "h_params")?;
    let params = h_params
        .iter()
        .map(|(name, raw)| parse_param(name, raw))
        .collect::<Result<Vec<_>, _>>()?;

    let mut conditions = Vec::new();
    if let Some(raw) = map.get("h_params_conditions") {
        let items = raw
            .as_array()
            .ok_or_else(|| ConfigError::invalid("h_params_conditions", "must be a list"))?;
        for (i, item) in items.iter().enumerate() {
            conditions.push(parse_condition(item, &format!("h_params_conditions[{i}]"))?);
        }
    }

    let mut conjunctions = Vec::new();
    if let Some(raw) = map.get("h_params_conjunctions") {
        let groups = raw
            .as_array()
            .ok_or_else(|| ConfigError::invalid("h_params_conjunctions", "must be a list"))?;
        for (i, group) in groups.iter().enumerate() {
            let field = format!("h_params_conjunctions[{i}]");
            let items = group
                .as_array()
                .ok_or_else(|| ConfigError::invalid(&field, "must be a list of conditions"))?;
            let parsed = items
                .iter()
                .enumerate()
                .map(|(j, c)| parse_condition(c, &format!("{field}[{j}]")))
                .collect::<Result<Vec<_>, _>>()?;
            conjunctions.push(parsed);
        }
    }

    let mut constants = BTreeMap::new();
    if let Some(raw) = map.get("h_params_constants") {
        for (name, v) in obj(raw, "h_params_constants")? {
            let value: Value = serde_json::from_value(v.clone()).map_err(|_| {
                ConfigError::invalid(
                    format!("h_params_constants.{name}"),
                    "must be a string or a number",
                )
            })?;
            constants.insert(name.clone(), value);
        }
    }

    HyperparamSpace::new(params, conditions, conjunctions, constants)
}

pub(crate) fn parse_tune(raw: &Json) -> Result<TuneConfig, ConfigError> {
    let map = obj(raw, "tune")?;
    if map.len() != 1 {
        return Err(ConfigError::invalid("tune", "must name exactly one tuner"));
    }
    let (name, body) = map.iter().next().expect("length checked");
    let field = format!("tune.{name}");
    let body_map = obj(body, &field)?;
    match name.as_str() {
        "random_search" | "random" => {
            reject_unknown(body_map, &[], &field)?;
            Ok(TuneConfig::RandomSearch)
        }
        "pbt" => {
            reject_unknown(
                body_map,
                &["exploit", "explore", "quantile", "perturb_factors", "resample_probability"],
                &field,
            )?;
            let mut pbt = PbtConfig::default();
            if let Some(v) = body_map.get("exploit") {
                let f = format!("{field}.exploit");
                match as_str(v, &f)? {
                    "truncation" => pbt.exploit = Exploit::Truncation,
                    other => return Err(ConfigError::invalid(f, format!("unsupported exploit `{other}`"))),
                }
            }
            if let Some(v) = body_map.get("explore") {
                let f = format!("{field}.explore");
                match as_str(v, &f)? {
                    "perturb" => pbt.explore = Explore::Perturb,
                    other => return Err(ConfigError::invalid(f, format!("unsupported explore `{other}`"))),
                }
            }
            if let Some(v) = body_map.get("quantile") {
                let f = format!("{field}.quantile");
                let q = as_f64(v, &f)?;
                if !(q > 0.0 && q <= 0.5) {
                    return Err(ConfigError::invalid(f, "must lie in (0, 0.5]"));
                }
                pbt.quantile = q;
            }
            if let Some(v) = body_map.get("perturb_factors") {
                let f = format!("{field}.perturb_factors");
                let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                    ConfigError::invalid(&f, "must be [low, high]")
                })?;
                let (low, high) = (as_f64(&pair[0], &f)?, as_f64(&pair[1], &f)?);
                if !(low > 0.0 && high > 0.0) {
                    return Err(ConfigError::invalid(f, "factors must be positive"));
                }
                pbt.perturb.low = low;
                pbt.perturb.high = high;
            }
            if let Some(v) = body_map.get("resample_probability") {
                let f = format!("{field}.resample_probability");
                let p = as_f64(v, &f)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(ConfigError::invalid(f, "must lie in [0, 1]"));
                }
                pbt.perturb.resample_probability = p;
            }
            Ok(TuneConfig::Pbt(pbt))
        }
        "hyperband" => {
            reject_unknown(body_map, &["resource_limit", "eta"], &field)?;
            let rf = format!("{field}.resource_limit");
            let resource_limit = as_u64(required(body_map, "resource_limit", &rf)?, &rf)?;
            if resource_limit == 0 || resource_limit > u32::MAX as u64 {
                return Err(ConfigError::invalid(rf, "must be a positive integer"));
            }
            let ef = format!("{field}.eta");
            let eta = match body_map.get("eta") {
                Some(v) => as_u64(v, &ef)?,
                None => DEFAULT_HYPERBAND_ETA as u64,
            };
            if !(2..=64).contains(&eta) {
                return Err(ConfigError::invalid(ef, "must be an integer >= 2"));
            }
            Ok(TuneConfig::Hyperband(HyperbandConfig {
                resource_limit: resource_limit as u32,
                eta: eta as u32,
            }))
        }
        other => Err(ConfigError::invalid("tune", format!("unknown tuner `{other}`"))),
    }
}

pub(crate) fn parse_termination(raw: &Json) -> Result<Termination, ConfigError> {
    let map = obj(raw, "termination")?;
    reject_unknown(
        map,
        &["time", "time_budget", "max_session_number", "performance_threshold"],
        "termination",
    )?;
    if map.contains_key("time") && map.contains_key("time_budget") {
        return Err(ConfigError::invalid(
            "termination.time",
            "give either `time` or `time_budget`, not both",
        ));
    }
    let mut t = Termination::default();
    for key in ["time", "time_budget"] {
        if let Some(v) = map.get(key) {
            let f = format!("termination.{key}");
            let ticks = as_u64(v, &f)?;
            if ticks == 0 {
                return Err(ConfigError::invalid(f, "must be positive"));
            }
            t.time = Some(ticks);
        }
    }
    if let Some(v) = map.get("max_session_number") {
        let f = "termination.max_session_number";
        let n = as_u64(v, f)?;
        if n == 0 {
            return Err(ConfigError::invalid(f, "must be positive"));
        }
        t.max_session_number = Some(n);
    }
    if let Some(v) = map.get("performance_threshold") {
        let f = "termination.performance_threshold";
        let x = as_f64(v, f)?;
        if !x.is_finite() {
            return Err(ConfigError::invalid(f, "must be finite"));
        }
        t.performance_threshold = Some(x);
    }
    if t.time.is_none() && t.max_session_number.is_none() && t.performance_threshold.is_none() {
        return Err(ConfigError::invalid(
            "termination",
            "at least one of time, max_session_number, performance_threshold is required",
        ));
    }
    Ok(t)
}

impl ChoptConfig {
    pub fn from_json(doc: &Json) -> Result<Self, ConfigError> {
        let map = obj(doc, "config")?;
        reject_unknown(map, TOP_LEVEL_KEYS, "")?;

        let space = parse_space(map)?;

        let measure = as_str(required(map, "measure", "measure")?, "measure")?.to_string();
        if measure.is_empty() {
            return Err(ConfigError::invalid("measure", "must be non-empty"));
        }

        let order = match as_str(required(map, "order", "order")?, "order")? {
            "descending" => Order::Descending,
            "ascending" => Order::Ascending,
            other => {
                return Err(ConfigError::invalid(
                    "order",
                    format!("must be `descending` or `ascending`, got `{other}`"),
                ))
            }
        };

        let step = match required(map, "step", "step")?.as_i64() {
            Some(-1) => CheckpointStep::Disabled,
            Some(n) if n >= 1 && n <= u32::MAX as i64 => CheckpointStep::Every(n as u32),
            _ => return Err(ConfigError::invalid("step", "must be -1 or a positive integer")),
        };

        let population = as_u64(required(map, "population", "population")?, "population")?;
        if population == 0 || population > u32::MAX as u64 {
            return Err(ConfigError::invalid("population", "must be at least 1"));
        }

        let tune = parse_tune(required(map, "tune", "tune")?)?;
        if matches!(tune, TuneConfig::Hyperband(_)) && step == CheckpointStep::Disabled {
            return Err(ConfigError::invalid(
                "step",
                "hyperband needs checkpoints; step cannot be -1",
            ));
        }

        let termination = parse_termination(required(map, "termination", "termination")?)?;

        let stop_ratio = match map.get("stop_ratio") {
            Some(v) => {
                let r = as_f64(v, "stop_ratio")?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(ConfigError::invalid("stop_ratio", "must lie in [0, 1]"));
                }
                r
            }
            None => DEFAULT_STOP_RATIO,
        };

        let seed = match map.get("seed") {
            Some(v) => Some(as_u64(v, "seed")?),
            None => None,
        };

        let workload = match map.get("workload") {
            Some(v) => {
                let spec: WorkloadSpec = serde_json::from_value(v.clone())
                    .map_err(|e| ConfigError::invalid("workload", e.to_string()))?;
                spec.validate_against(&space)?;
                Some(spec)
            }
            None => None,
        };

        Ok(ChoptConfig {
            space,
            measure,
            order,
            step,
            population: population as u32,
            tune,
            termination,
            stop_ratio,
            seed,
            workload,
        })
    }

    /// Canonical JSON form with every default made explicit.
    pub fn to_json(&self) -> Json {
        let mut h_params = Map::new();
        for p in self.space.params() {
            let p_range = match p.p_range {
                Some((lo, hi)) => json!([lo, hi]),
                None => json!([]),
            };
            h_params.insert(
                p.name.clone(),
                json!({
                    "parameters": p.parameters.to_json(),
                    "distribution": p.distribution.as_str(),
                    "type": kind_token(p.kind),
                    "p_range": p_range,
                }),
            );
        }
        let mut doc = Map::new();
        doc.insert("h_params".into(), Json::Object(h_params));
        doc.insert(
            "h_params_conditions".into(),
            serde_json::to_value(self.space.conditions()).expect("conditions serialize"),
        );
        doc.insert(
            "h_params_conjunctions".into(),
            serde_json::to_value(self.space.conjunctions()).expect("conditions serialize"),
        );
        if !self.space.constants().is_empty() {
            doc.insert(
                "h_params_constants".into(),
                serde_json::to_value(self.space.constants()).expect("constants serialize"),
            );
        }
        doc.insert("measure".into(), json!(self.measure));
        doc.insert("order".into(), json!(self.order.as_str()));
        doc.insert("step".into(), self.step.to_json());
        doc.insert("population".into(), json!(self.population));
        let tune = match &self.tune {
            TuneConfig::RandomSearch => json!({ "random_search": {} }),
            TuneConfig::Pbt(p) => json!({ "pbt": {
                "exploit": "truncation",
                "explore": "perturb",
                "quantile": p.quantile,
                "perturb_factors": [p.perturb.low, p.perturb.high],
                "resample_probability": p.perturb.resample_probability,
            }}),
            TuneConfig::Hyperband(h) => json!({ "hyperband": {
                "resource_limit": h.resource_limit,
                "eta": h.eta,
            }}),
        };
        doc.insert("tune".into(), tune);
        let mut term = Map::new();
        if let Some(t) = self.termination.time {
            term.insert("time".into(), json!(t));
        }
        if let Some(n) = self.termination.max_session_number {
            term.insert("max_session_number".into(), json!(n));
        }
        if let Some(x) = self.termination.performance_threshold {
            term.insert("performance_threshold".into(), json!(x));
        }
        doc.insert("termination".into(), Json::Object(term));
        doc.insert("stop_ratio".into(), json!(self.stop_ratio));
        if let Some(seed) = self.seed {
            doc.insert("seed".into(), json!(seed));
        }
        if let Some(w) = &self.workload {
            doc.insert(
                "workload".into(),
                serde_json::to_value(w).expect("workload serializes"),
            );
        }
        Json::Object(doc)
    }

    pub fn to_pretty_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("config serializes")
    }
}

impl Serialize for ChoptConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ChoptConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = Json::deserialize(deserializer)?;
        ChoptConfig::from_json(&doc).map_err(serde::de::Error::custom)
    }
}

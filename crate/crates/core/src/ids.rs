use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Identifier of one optimization session, rendered as `s0001`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u32);

/// Identifier of a trial within its session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialId(pub u32);

/// Identifier of an agent process, rendered as `a1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{:04}", self.0)
    }
}

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed identifier `{0}`")]
pub struct ParseIdError(pub String);

fn parse_prefixed(s: &str, prefix: char) -> Result<u32, ParseIdError> {
    s.strip_prefix(prefix)
        .and_then(|rest| rest.parse().ok())
        .ok_or_else(|| ParseIdError(s.to_string()))
}

impl FromStr for SessionId {
    type Err = ParseIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_prefixed(s, 's').map(SessionId)
    }
}

impl FromStr for AgentId {
    type Err = ParseIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_prefixed(s, 'a').map(AgentId)
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(SessionId);
string_serde!(AgentId);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_ids_round_trip_through_text() {
        let id = SessionId(12);
        assert_eq!(id.to_string(), "s0012");
        assert_eq!("s0012".parse::<SessionId>().unwrap(), id);
        assert!("x12".parse::<SessionId>().is_err());
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, "\"s0012\"");
    }

    #[test]
    fn agent_ids_order_numerically() {
        let mut ids = vec![AgentId(10), AgentId(2), AgentId(1)];
        ids.sort();
        assert_eq!(ids, vec![AgentId(1), AgentId(2), AgentId(10)]);
        assert_eq!("a10".parse::<AgentId>().unwrap(), AgentId(10));
    }
}

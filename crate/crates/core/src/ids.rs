//! Entity identifiers.
//!
//! Requests are plain integers on the wire; instances and nodes are rendered
//! with a one-letter prefix (`I3`, `N1`) so they read the same in CSV exports,
//! the event log and control commands.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

macro_rules! prefixed_id {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = ParseIdError;

            /// Accepts both the prefixed form (`N1`) and a bare integer (`1`).
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let digits = s.strip_prefix($prefix).unwrap_or(s);
                digits
                    .parse::<u64>()
                    .map($name)
                    .map_err(|_| ParseIdError(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

prefixed_id!(InstanceId, "I");
prefixed_id!(NodeId, "N");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed identifier `{0}`")]
pub struct ParseIdError(pub String);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_ids_parse_with_or_without_prefix() {
        assert_eq!("N1".parse::<NodeId>().unwrap(), NodeId(1));
        assert_eq!("7".parse::<NodeId>().unwrap(), NodeId(7));
        assert!("X1".parse::<NodeId>().is_err());
        assert_eq!(InstanceId(3).to_string(), "I3");
    }

    #[test]
    fn ids_serialize_as_prefixed_strings() {
        let json = serde_json::to_string(&NodeId(2)).unwrap();
        assert_eq!(json, "\"N2\"");
        let back: NodeId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, NodeId(2));
    }
}

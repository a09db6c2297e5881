use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "MAP")]
    Map,
    #[serde(rename = "MCD")]
    Mcd,
    Ensemble,
    #[serde(rename = "SWAG")]
    Swag,
    #[serde(rename = "BBB")]
    Bbb,
    #[serde(rename = "CP")]
    Cp,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::Map,
        MethodId::Mcd,
        MethodId::Ensemble,
        MethodId::Swag,
        MethodId::Bbb,
        MethodId::Cp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Map => "MAP",
            MethodId::Mcd => "MCD",
            MethodId::Ensemble => "Ensemble",
            MethodId::Swag => "SWAG",
            MethodId::Bbb => "BBB",
            MethodId::Cp => "CP",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricId {
    #[serde(rename = "CRPS")]
    Crps,
    #[serde(rename = "NLL")]
    Nll,
    /// Stored as a covered count plus test size; the value is `k / N_test`.
    #[serde(rename = "PICP")]
    Picp,
    #[serde(rename = "MPIW")]
    Mpiw,
    IntervalScore,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [
        MetricId::Crps,
        MetricId::Nll,
        MetricId::Picp,
        MetricId::Mpiw,
        MetricId::IntervalScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Crps => "CRPS",
            MetricId::Nll => "NLL",
            MetricId::Picp => "PICP",
            MetricId::Mpiw => "MPIW",
            MetricId::IntervalScore => "IntervalScore",
        }
    }

    /// Lower is better for every metric except coverage.
    pub fn lower_is_better(self) -> bool {
        !matches!(self, MetricId::Picp)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown metric '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn string_forms_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        for m in MetricId::ALL {
            assert_eq!(m.as_str().parse::<MetricId>().unwrap(), m);
        }
        assert!("dropout".parse::<MethodId>().is_err());
    }
}

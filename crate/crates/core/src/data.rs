//! Historical data containers and calibration settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One binomial cluster: number of successes and failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub successes: u64,
    pub failures: u64,
}

impl Cluster {
    pub fn size(&self) -> u64 {
        self.successes + self.failures
    }
}

/// Clustered binomial data (successes out of `n_h` per cluster).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteredBinomial {
    clusters: Vec<Cluster>,
    total: u64,
}

impl ClusteredBinomial {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        if clusters.len() < 2 {
            return Err(Error::InvalidData(format!(
                "at least 2 clusters required, got {}",
                clusters.len()
            )));
        }
        if let Some(pos) = clusters.iter().position(|c| c.size() == 0) {
            return Err(Error::InvalidData(format!(
                "cluster {} is empty (succ + fail = 0)",
                pos + 1
            )));
        }
        let total = clusters.iter().map(Cluster::size).sum();
        Ok(Self { clusters, total })
    }

    pub fn from_pairs(pairs: &[(u64, u64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(successes, failures)| Cluster {
                    successes,
                    failures,
                })
                .collect(),
        )
    }

    /// Builds clusters from success counts and cluster sizes.
    pub fn from_counts(successes: &[u64], sizes: &[u64]) -> Result<Self> {
        if successes.len() != sizes.len() {
            return Err(Error::InvalidData(
                "successes and sizes differ in length".into(),
            ));
        }
        let clusters = successes
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&y, &n))| {
                if y > n {
                    Err(Error::InvalidData(format!(
                        "cluster {}: {y} successes exceed size {n}",
                        i + 1
                    )))
                } else {
                    Ok(Cluster {
                        successes: y,
                        failures: n - y,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clusters)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Number of clusters `H`.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of units `N = Σ n_h`.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn total_successes(&self) -> u64 {
        self.clusters.iter().map(|c| c.successes).sum()
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.clusters.iter().map(Cluster::size).collect()
    }
}

impl<'de> Deserialize<'de> for ClusteredBinomial {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            clusters: Vec<Cluster>,
        }
        let raw = Raw::deserialize(d)?;
        ClusteredBinomial::new(raw.clusters).map_err(serde::de::Error::custom)
    }
}

/// Clustered count data, one count per cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteredCounts {
    counts: Vec<u64>,
}

impl ClusteredCounts {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidData(format!(
                "at least 2 clusters required, got {}",
                counts.len()
            )));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_clusters(&self) -> usize {
        self.counts.len()
    }
}

impl<'de> Deserialize<'de> for ClusteredCounts {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            counts: Vec<u64>,
        }
        let raw = Raw::deserialize(d)?;
        ClusteredCounts::new(raw.counts).map_err(serde::de::Error::custom)
    }
}

/// A named column of categorical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorColumn {
    pub name: String,
    pub labels: Vec<String>,
}

/// Gaussian responses plus the factor columns that define the random terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedModelData {
    response_name: String,
    response: Vec<f64>,
    factors: Vec<FactorColumn>,
}

impl MixedModelData {
    pub fn new(
        response_name: impl Into<String>,
        response: Vec<f64>,
        factors: Vec<FactorColumn>,
    ) -> Result<Self> {
        let n = response.len();
        if n == 0 {
            return Err(Error::InvalidData("no observations".into()));
        }
        if let Some(i) = response.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "response value in row {} is missing or not finite",
                i + 1
            )));
        }
        for f in &factors {
            if f.labels.len() != n {
                return Err(Error::InvalidData(format!(
                    "factor `{}` has {} rows, response has {n}",
                    f.name,
                    f.labels.len()
                )));
            }
            if let Some(i) = f.labels.iter().position(|l| l.trim().is_empty() || l == "NA") {
                return Err(Error::InvalidData(format!(
                    "factor `{}` has a missing label in row {}",
                    f.name,
                    i + 1
                )));
            }
        }
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::InvalidData(format!(
                    "duplicate factor column `{}`",
                    f.name
                )));
            }
        }
        Ok(Self {
            response_name: response_name.into(),
            response,
            factors,
        })
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn factors(&self) -> &[FactorColumn] {
        &self.factors
    }

    pub fn factor(&self, name: &str) -> Option<&FactorColumn> {
        self.factors.iter().find(|f| f.name == name)
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    /// Same layout with a different response vector.
    pub fn with_response(&self, response: Vec<f64>) -> Result<Self> {
        Self::new(self.response_name.clone(), response, self.factors.clone())
    }
}

/// Two-sided interval or a one-sided bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    #[default]
    Both,
    /// Lower bound only; the upper side is open.
    Lower,
    /// Upper bound only; the lower side is open.
    Upper,
}

impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Alternative::Both),
            "lower" => Ok(Alternative::Lower),
            "upper" => Ok(Alternative::Upper),
            other => Err(Error::InvalidSetting(format!(
                "alternative must be both, lower or upper, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::Both => "both",
            Alternative::Lower => "lower",
            Alternative::Upper => "upper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub alpha: f64,
    pub nboot: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub tolerance: f64,
    pub max_bisection_steps: usize,
    pub alternative: Alternative,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            nboot: 10_000,
            delta_min: 0.01,
            delta_max: 10.0,
            tolerance: 0.003,
            max_bisection_steps: 30,
            alternative: Alternative::Both,
            seed: 1234,
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSetting(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.nboot == 0 {
            return Err(Error::InvalidSetting("nboot must be positive".into()));
        }
        if !(self.delta_min > 0.0 && self.delta_min.is_finite()) {
            return Err(Error::InvalidSetting(format!(
                "delta_min must be positive, got {}",
                self.delta_min
            )));
        }
        if !(self.delta_max > self.delta_min && self.delta_max.is_finite()) {
            return Err(Error::InvalidSetting(format!(
                "delta_max ({}) must exceed delta_min ({})",
                self.delta_max, self.delta_min
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidSetting(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_bisection_steps == 0 {
            return Err(Error::InvalidSetting(
                "max_bisection_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Nominal coverage `1 - alpha`.
    pub fn target(&self) -> f64 {
        1.0 - self.alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_needs_two_nonempty_clusters() {
        assert!(ClusteredBinomial::from_pairs(&[(1, 2)]).is_err());
        assert!(ClusteredBinomial::from_pairs(&[(1, 2), (0, 0)]).is_err());
        let d = ClusteredBinomial::from_pairs(&[(1, 2), (3, 4)]).unwrap();
        assert_eq!(d.total(), 10);
        assert_eq!(d.n_clusters(), 2);
    }

    #[test]
    fn deserialization_rechecks_invariants() {
        let ok: ClusteredBinomial = serde_json::from_str(
            r#"{"clusters":[{"successes":1,"failures":1},{"successes":0,"failures":3}]}"#,
        )
        .unwrap();
        assert_eq!(ok.total(), 5);
        let bad = serde_json::from_str::<ClusteredBinomial>(
            r#"{"clusters":[{"successes":1,"failures":1}]}"#,
        );
        assert!(bad.is_err());
        assert!(serde_json::from_str::<ClusteredCounts>(r#"{"counts":[3]}"#).is_err());
    }

    #[test]
    fn counts_need_two_clusters() {
        assert!(ClusteredCounts::new(vec![4]).is_err());
        assert!(ClusteredCounts::new(vec![4, 5]).is_ok());
    }

    #[test]
    fn missing_values_rejected() {
        let col = |labels: &[&str]| FactorColumn {
            name: "a".into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        assert!(MixedModelData::new("y", vec![1.0, f64::NAN], vec![col(&["1", "2"])]).is_err());
        assert!(MixedModelData::new("y", vec![1.0, 2.0], vec![col(&["1", "NA"])]).is_err());
        assert!(MixedModelData::new("y", vec![1.0, 2.0], vec![col(&["1"])]).is_err());
        assert!(MixedModelData::new("y", vec![1.0, 2.0], vec![col(&["1", "2"])]).is_ok());
    }

    #[test]
    fn settings_validation() {
        let ok = CalibrationSettings::default();
        ok.validate().unwrap();
        for bad in [
            CalibrationSettings { alpha: 1.0, ..ok.clone() },
            CalibrationSettings { nboot: 0, ..ok.clone() },
            CalibrationSettings { delta_min: 2.0, delta_max: 1.0, ..ok.clone() },
            CalibrationSettings { tolerance: 0.0, ..ok.clone() },
            CalibrationSettings { max_bisection_steps: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

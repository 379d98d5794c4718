//! Threshold selection and the stolen / irrelevant decision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{FingerprintDistance, Kernel};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdStrategy {
    /// Smallest distance observed among irrelevant models.
    WorstIrrelevant,
    /// Midpoint of the irrelevant and adversarial-extraction means.
    ValidationMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub strategy: ThresholdStrategy,
    /// Fingerprints the threshold was derived from.
    pub pool: Vec<Digest>,
}

impl Threshold {
    pub fn with_pool(mut self, pool: Vec<Digest>) -> Self {
        self.pool = pool;
        self
    }
}

fn check_pool(distances: &[f64]) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(d) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::InvalidConfig(format!("pool distance {d} is not a non-negative number")));
    }
    Ok(())
}

pub fn threshold_worst_irrelevant(irrelevant: &[f64]) -> Result<Threshold> {
    check_pool(irrelevant)?;
    Ok(Threshold {
        value: irrelevant.iter().copied().fold(f64::INFINITY, f64::min),
        strategy: ThresholdStrategy::WorstIrrelevant,
        pool: Vec::new(),
    })
}

pub fn threshold_validation_mean(irrelevant: &[f64], adv_extraction: &[f64]) -> Result<Threshold> {
    check_pool(irrelevant)?;
    check_pool(adv_extraction)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Threshold {
        value: 0.5 * (mean(irrelevant) + mean(adv_extraction)),
        strategy: ThresholdStrategy::ValidationMean,
        pool: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Stolen,
    Irrelevant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub suspect_digest: Digest,
    pub distance: f64,
    pub threshold: Threshold,
    pub decision: Decision,
}

/// Stolen iff `distance <= threshold` (ties are stolen).
pub fn decide(distance: &FingerprintDistance, threshold: &Threshold) -> Verdict {
    let decision = if distance.value <= threshold.value {
        Decision::Stolen
    } else {
        Decision::Irrelevant
    };
    Verdict {
        suspect_digest: distance.suspect_digest,
        distance: distance.value,
        threshold: threshold.clone(),
        decision,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuspectResult {
    pub name: String,
    /// Digest of the suspect's fingerprint.
    pub fingerprint: Digest,
    pub distance: f64,
    pub decision: Decision,
}

/// Audit report: one threshold for every suspect on one probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub probe_digest: Digest,
    pub kernel: Kernel,
    pub threshold: Threshold,
    pub suspects: Vec<SuspectResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalReport>,
}

impl AuditReport {
    /// Decide every suspect against `threshold`; suspects are ordered by name.
    pub fn build(
        probe_digest: Digest,
        kernel: Kernel,
        threshold: Threshold,
        suspects: impl IntoIterator<Item = (String, FingerprintDistance)>,
    ) -> Self {
        let mut suspects: Vec<SuspectResult> = suspects
            .into_iter()
            .map(|(name, d)| SuspectResult {
                name,
                fingerprint: d.suspect_digest,
                distance: d.value,
                decision: decide(&d, &threshold).decision,
            })
            .collect();
        suspects.sort_by(|a, b| a.name.cmp(&b.name));
        AuditReport {
            probe_digest,
            kernel,
            threshold,
            suspects,
            metrics: None,
        }
    }

    pub fn any_stolen(&self) -> bool {
        self.suspects.iter().any(|s| s.decision == Decision::Stolen)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        crate::binfmt::write_file(path.as_ref(), &json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::binfmt::read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

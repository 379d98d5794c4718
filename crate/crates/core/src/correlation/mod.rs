//! Sample-correlation fingerprints.
//!
//! A model is characterised by the n x n matrix of pairwise correlations
//! between its outputs on a fixed probe set. Two models are compared by the
//! mean absolute entrywise difference of their matrices.

mod format;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Result};

pub use format::{OUTPUTS_MAGIC, FINGERPRINT_MAGIC};

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Probability,
    Logit,
    Bitvector,
}

impl OutputKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            OutputKind::Probability => 0,
            OutputKind::Logit => 1,
            OutputKind::Bitvector => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(OutputKind::Probability),
            1 => Ok(OutputKind::Logit),
            2 => Ok(OutputKind::Bitvector),
            _ => Err(Error::Parse(format!("unknown output kind {t}"))),
        }
    }
}

/// A model's outputs on a probe set: one row per probe, in probe-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    values: Array2<f64>,
    kind: OutputKind,
    probe_digest: Digest,
}

impl OutputMatrix {
    pub fn new(values: Array2<f64>, kind: OutputKind, probe_digest: Digest) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidOutputs(format!("empty {n}x{d} matrix")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidOutputs(format!("non-finite entry {v}")));
        }
        match kind {
            OutputKind::Probability => {
                for (i, row) in values.rows().into_iter().enumerate() {
                    if row.iter().any(|&v| v < 0.0) {
                        return Err(Error::InvalidOutputs(format!("row {i} has a negative probability")));
                    }
                    let s: f64 = row.sum();
                    if (s - 1.0).abs() > PROB_SUM_TOL {
                        return Err(Error::InvalidOutputs(format!("row {i} sums to {s}")));
                    }
                }
            }
            OutputKind::Bitvector => {
                if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidOutputs("bitvector entries must be 0 or 1".into()));
                }
            }
            OutputKind::Logit => {}
        }
        Ok(OutputMatrix {
            values,
            kind,
            probe_digest,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn kind(&self) -> OutputKind {
        self.kind
    }

    pub fn probe_digest(&self) -> Digest {
        self.probe_digest
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Keep the first `n` rows, re-addressed to a different probe digest.
    pub fn truncated(&self, n: usize, probe_digest: Digest) -> Result<Self> {
        if n == 0 || n > self.rows() {
            return Err(Error::ShapeMismatch(format!("cannot keep {n} of {} rows", self.rows())));
        }
        Ok(OutputMatrix {
            values: self.values.slice(ndarray::s![..n, ..]).to_owned(),
            kind: self.kind,
            probe_digest,
        })
    }
}

/// What the caller asks for; an unset RBF bandwidth is filled with the
/// median heuristic on the outputs being fingerprinted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelSpec {
    Cosine,
    Rbf { bandwidth: Option<f64> },
}

/// Kernel with every parameter resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Kernel {
    Cosine,
    Rbf { bandwidth: f64 },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Cosine => "cosine",
            Kernel::Rbf { .. } => "rbf",
        }
    }
}

impl From<Kernel> for KernelSpec {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Cosine => KernelSpec::Cosine,
            Kernel::Rbf { bandwidth } => KernelSpec::Rbf {
                bandwidth: Some(bandwidth),
            },
        }
    }
}

impl KernelSpec {
    pub fn resolve(&self, outputs: &OutputMatrix) -> Result<Kernel> {
        match *self {
            KernelSpec::Cosine => Ok(Kernel::Cosine),
            KernelSpec::Rbf { bandwidth: Some(b) } => {
                if b > 0.0 && b.is_finite() {
                    Ok(Kernel::Rbf { bandwidth: b })
                } else {
                    Err(Error::InvalidBandwidth(b))
                }
            }
            KernelSpec::Rbf { bandwidth: None } => Ok(Kernel::Rbf {
                bandwidth: median_bandwidth(outputs)?,
            }),
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        Err(Error::DimensionMismatch(a.len(), b.len()))
    } else {
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    // one sqrt of the product keeps cos(a, a) at exactly 1
    Ok((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Gaussian RBF similarity `exp(-|a-b|^2 / (2 bandwidth^2))`.
pub fn rbf_corr(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    check_dims(a, b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    let d2 = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
    // far-apart rows underflow to 0; keep the kernel strictly positive
    Ok((-d2 / (2.0 * bandwidth * bandwidth)).exp().max(f64::MIN_POSITIVE))
}

/// Median of all pairwise Euclidean row distances; 1.0 when that is zero.
pub fn median_bandwidth(outputs: &OutputMatrix) -> Result<f64> {
    let n = outputs.rows();
    if n < 2 {
        return Err(Error::InsufficientRows { needed: 2, got: n });
    }
    let rows: Vec<Vec<f64>> = outputs.values.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2 = rows[i]
                .iter()
                .zip(&rows[j])
                .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median == 0.0 { 1.0 } else { median })
}

/// The n x n model-specific correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    entries: Array2<f64>,
    kernel: Kernel,
    probe_digest: Digest,
}

impl CorrelationMatrix {
    /// Wrap raw entries, checking the structural invariants.
    pub fn from_entries(entries: Array2<f64>, kernel: Kernel, probe_digest: Digest) -> Result<Self> {
        let (n, m) = entries.dim();
        if n != m || n == 0 {
            return Err(Error::ShapeMismatch(format!("correlation matrix is {n}x{m}")));
        }
        let c = CorrelationMatrix {
            entries,
            kernel,
            probe_digest,
        };
        c.check_invariants().map_err(Error::InvalidOutputs)?;
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn probe_digest(&self) -> Digest {
        self.probe_digest
    }

    /// Content address of the serialized fingerprint.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }

    /// Symmetry, kernel range and unit-diagonal checks; returns a description
    /// of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                let v = self.entries[[i, j]];
                if !v.is_finite() {
                    return Err(format!("entry ({i},{j}) is not finite"));
                }
                if (v - self.entries[[j, i]]).abs() > 1e-12 {
                    return Err(format!("asymmetric at ({i},{j})"));
                }
                match self.kernel {
                    Kernel::Cosine if !(-1.0..=1.0).contains(&v) => {
                        return Err(format!("cosine entry ({i},{j}) = {v} outside [-1,1]"));
                    }
                    Kernel::Rbf { .. } if !(v > 0.0 && v <= 1.0) => {
                        return Err(format!("rbf entry ({i},{j}) = {v} outside (0,1]"));
                    }
                    _ => {}
                }
            }
            let diag = self.entries[[i, i]];
            // zero rows under cosine also get 1 on the diagonal (corr(0,0) = 1)
            if diag != 1.0 {
                return Err(format!("diagonal entry {i} = {diag}"));
            }
        }
        Ok(())
    }
}

/// Apply the kernel to every pair of output rows.
///
/// Under cosine, a zero row correlates 0 with every nonzero row and 1 with
/// other zero rows.
pub fn correlation_matrix(outputs: &OutputMatrix, kernel: KernelSpec) -> Result<CorrelationMatrix> {
    let n = outputs.rows();
    if n < 2 {
        return Err(Error::InsufficientRows { needed: 2, got: n });
    }
    let kernel = kernel.resolve(outputs)?;
    let rows: Vec<Vec<f64>> = outputs.values.rows().into_iter().map(|r| r.to_vec()).collect();
    let zero: Vec<bool> = rows.iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
    if matches!(kernel, Kernel::Cosine) {
        let zeros = zero.iter().filter(|&&z| z).count();
        if zeros > 0 {
            log::warn!("{zeros} zero output rows; cosine falls back to corr(0,x)=0, corr(0,0)=1");
        }
    }

    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    if i == j {
                        return Ok(1.0);
                    }
                    match kernel {
                        Kernel::Cosine => match (zero[i], zero[j]) {
                            (true, true) => Ok(1.0),
                            (true, false) | (false, true) => Ok(0.0),
                            (false, false) => cosine_corr(&rows[i], &rows[j]),
                        },
                        Kernel::Rbf { bandwidth } => rbf_corr(&rows[i], &rows[j], bandwidth),
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut entries = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let j = i + k;
            entries[[i, j]] = v;
            entries[[j, i]] = v;
        }
    }
    Ok(CorrelationMatrix {
        entries,
        kernel,
        probe_digest: outputs.probe_digest,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintDistance {
    pub value: f64,
    pub source_digest: Digest,
    pub suspect_digest: Digest,
}

/// Mean absolute entrywise difference `sum |suspect - source| / n^2`.
pub fn fingerprint_distance(
    source: &CorrelationMatrix,
    suspect: &CorrelationMatrix,
) -> Result<FingerprintDistance> {
    if source.probe_digest != suspect.probe_digest {
        return Err(Error::ProbeSetMismatch(format!(
            "source fingerprint uses probes {} but suspect uses {}",
            source.probe_digest.short(),
            suspect.probe_digest.short()
        )));
    }
    if source.n() != suspect.n() {
        return Err(Error::ShapeMismatch(format!(
            "source is {0}x{0}, suspect is {1}x{1}",
            source.n(),
            suspect.n()
        )));
    }
    if source.kernel != suspect.kernel {
        return Err(Error::KernelMismatch(format!(
            "source uses {:?}, suspect uses {:?}",
            source.kernel, suspect.kernel
        )));
    }
    let n = source.n();
    let total = source
        .entries
        .iter()
        .zip(suspect.entries.iter())
        .fold(0.0, |acc, (a, b)| acc + (b - a).abs());
    Ok(FingerprintDistance {
        value: total / (n * n) as f64,
        source_digest: source.digest(),
        suspect_digest: suspect.digest(),
    })
}

/// Fraction of probes on which two output matrices disagree on the argmax
/// label. A point-wise indicator, used as a baseline against the
/// correlation distance.
pub fn label_disagreement(a: &OutputMatrix, b: &OutputMatrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!("{} vs {} rows", a.rows(), b.rows())));
    }
    if a.probe_digest != b.probe_digest {
        return Err(Error::ProbeSetMismatch("outputs come from different probe sets".into()));
    }
    let argmax = |r: ArrayView1<f64>| {
        r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let differ = (0..a.rows()).filter(|&i| argmax(a.row(i)) != argmax(b.row(i))).count();
    Ok(differ as f64 / a.rows() as f64)
}

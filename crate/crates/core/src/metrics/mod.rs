//! Detection-quality metrics over a labelled pool of suspect scores.
//!
//! Scores are fingerprint distances, so *lower* means *more likely stolen*
//! throughout: AUC counts how often a stolen model scores below an
//! irrelevant one, and a model is predicted stolen when its score is at or
//! below the threshold.

pub mod special;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Stolen,
    Irrelevant,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stolen" | "1" | "positive" => Ok(Label::Stolen),
            "irrelevant" | "0" | "negative" => Ok(Label::Irrelevant),
            other => Err(Error::Parse(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub name: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredPool {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredPool {
    pub fn new(entries: Vec<ScoredEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::InvalidConfig(format!("score of {} is not finite", e.name)));
        }
        Ok(ScoredPool { entries })
    }

    pub fn push(&mut self, name: impl Into<String>, score: f64, label: Label) {
        self.entries.push(ScoredEntry {
            name: name.into(),
            score,
            label,
        });
    }

    pub fn scores(&self, label: Label) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.score)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read `name,score,label` rows (header optional).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            if rec.len() != 3 {
                return Err(Error::Parse(format!("{}: row {} has {} columns", path.display(), i + 1, rec.len())));
            }
            if i == 0 && rec[1].eq_ignore_ascii_case("score") {
                continue;
            }
            let score: f64 = rec[1]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad score {:?}", path.display(), &rec[1])))?;
            entries.push(ScoredEntry {
                name: rec[0].to_string(),
                score,
                label: rec[2].parse()?,
            });
        }
        ScoredPool::new(entries)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
        w.write_record(["name", "score", "label"]).map_err(io)?;
        for e in &self.entries {
            let label = match e.label {
                Label::Stolen => "stolen",
                Label::Irrelevant => "irrelevant",
            };
            w.write_record([e.name.as_str(), &format!("{:.17e}", e.score), label])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Probability that a random stolen entry scores strictly lower than a
/// random irrelevant entry, ties counting one half.
pub fn auc_roc(pool: &ScoredPool) -> Result<f64> {
    let stolen = pool.scores(Label::Stolen);
    let mut irrelevant = pool.scores(Label::Irrelevant);
    if stolen.is_empty() || irrelevant.is_empty() {
        return Err(Error::SingleClass);
    }
    irrelevant.sort_by(f64::total_cmp);
    // count in half-units so ties stay integral
    let mut half_wins: u64 = 0;
    for s in &stolen {
        let below_or_eq = irrelevant.partition_point(|&v| v <= *s);
        let below = irrelevant.partition_point(|&v| v < *s);
        let greater = irrelevant.len() - below_or_eq;
        let ties = below_or_eq - below;
        half_wins += 2 * greater as u64 + ties as u64;
    }
    Ok(half_wins as f64 / (2 * stolen.len() * irrelevant.len()) as f64)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// Welch's t statistic and Welch-Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let needed = 2;
    let got = a.len().min(b.len());
    if got < needed {
        return Err(Error::InsufficientSamples { needed, got });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let t = if ma == mb { 0.0 } else { f64::INFINITY.copysign(ma - mb) };
        return Ok((t, f64::INFINITY));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok((t, df))
}

/// Two-sided two-sample t-test p-value (unequal variances).
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let (t, df) = welch_t(a, b)?;
    if t == 0.0 {
        return Ok(1.0);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(special::student_t_two_sided(t, df))
}

/// Welch t-test between the stolen and irrelevant score groups.
pub fn t_test_p(pool: &ScoredPool) -> Result<f64> {
    welch_p_value(&pool.scores(Label::Stolen), &pool.scores(Label::Irrelevant))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 with "stolen" as the positive class, predicted when `score <= threshold`.
pub fn f1_at_threshold(pool: &ScoredPool, threshold: f64) -> (f64, Confusion) {
    let mut c = Confusion::default();
    for e in &pool.entries {
        match (e.score <= threshold, e.label) {
            (true, Label::Stolen) => c.tp += 1,
            (true, Label::Irrelevant) => c.fp += 1,
            (false, Label::Irrelevant) => c.tn += 1,
            (false, Label::Stolen) => c.fn_ += 1,
        }
    }
    (c.f1(), c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    /// Absent when either group has fewer than two scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub f1: f64,
    pub threshold_used: f64,
    pub counts: Confusion,
}

/// All three metrics at once. With no threshold given, the smallest
/// irrelevant score is used (the worst-irrelevant rule).
pub fn evaluate(pool: &ScoredPool, threshold: Option<f64>) -> Result<EvalReport> {
    let auc = auc_roc(pool)?;
    let p_value = match t_test_p(pool) {
        Ok(p) => Some(p),
        Err(Error::InsufficientSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    let threshold_used = match threshold {
        Some(t) => t,
        None => pool
            .scores(Label::Irrelevant)
            .into_iter()
            .fold(f64::INFINITY, f64::min),
    };
    let (f1, counts) = f1_at_threshold(pool, threshold_used);
    Ok(EvalReport {
        auc,
        p_value,
        f1,
        threshold_used,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(stolen: &[f64], irrelevant: &[f64]) -> ScoredPool {
        let mut p = ScoredPool::default();
        for (i, &s) in stolen.iter().enumerate() {
            p.push(format!("s{i}"), s, Label::Stolen);
        }
        for (i, &s) in irrelevant.iter().enumerate() {
            p.push(format!("i{i}"), s, Label::Irrelevant);
        }
        p
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&pool(&[0.1, 0.2], &[0.3, 0.4])).unwrap(), 1.0);
        assert_eq!(auc_roc(&pool(&[0.3], &[0.3])).unwrap(), 0.5);
        assert_eq!(auc_roc(&pool(&[0.1, 0.4], &[0.2, 0.3])).unwrap(), 0.5);
        assert_eq!(auc_roc(&pool(&[0.5, 0.6], &[0.1])).unwrap(), 0.0);
        assert!(matches!(auc_roc(&pool(&[0.1], &[])), Err(Error::SingleClass)));
    }

    #[test]
    fn t_test_examples() {
        let p = welch_p_value(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
        let a = [0.0, 1e-6, -1e-6, 0.5e-6];
        let b = [1.0, 1.0 + 1e-6, 1.0 - 0.5e-6, 1.0 + 0.2e-6];
        assert!(welch_p_value(&a, &b).unwrap() < 1e-6);
        assert_eq!(welch_p_value(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(welch_p_value(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            welch_p_value(&[1.0], &[1.0, 2.0]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        let x = [0.12, 0.4, 0.33, 0.05];
        let y = [0.5, 0.61, 0.42];
        let neg = |v: &[f64]| v.iter().map(|z| -z).collect::<Vec<_>>();
        let p1 = welch_p_value(&x, &y).unwrap();
        let p2 = welch_p_value(&neg(&x), &neg(&y)).unwrap();
        assert!((p1 - p2).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        let (f1, c) = f1_at_threshold(&pool(&[0.1, 0.2], &[0.5, 0.6]), 0.3);
        assert_eq!(f1, 1.0);
        assert_eq!(c, Confusion { tp: 2, fp: 0, tn: 2, fn_: 0 });

        let (f1, c) = f1_at_threshold(&pool(&[0.4, 0.5], &[0.6]), 0.1);
        assert_eq!(f1, 0.0);
        assert_eq!(c.tp + c.fp, 0);

        // tp=3, fp=1, fn=1
        let (f1, c) = f1_at_threshold(&pool(&[0.1, 0.2, 0.3, 0.9], &[0.25, 0.8]), 0.3);
        assert_eq!(c, Confusion { tp: 3, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.75);
        assert!((f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn threshold_tie_counts_as_positive() {
        let (_, c) = f1_at_threshold(&pool(&[0.3], &[0.4]), 0.3);
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn evaluate_defaults_to_worst_irrelevant() {
        let r = evaluate(&pool(&[0.1, 0.2, 0.15], &[0.3, 0.35, 0.5]), None).unwrap();
        assert_eq!(r.threshold_used, 0.3);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.counts.fp, 1);
        assert!(r.p_value.is_some());
        let single = evaluate(&pool(&[0.1], &[0.3, 0.4]), None).unwrap();
        assert_eq!((single.auc, single.p_value), (1.0, None));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let p = pool(&[0.1, 0.123_456_789_012_345_67], &[0.3]);
        p.write_csv(&path).unwrap();
        assert_eq!(ScoredPool::read_csv(&path).unwrap(), p);
    }
}

//! Desk-scale model zoo: seeded training of small classifiers, the attack
//! families used to derive stolen copies, and embedding verifiers.

pub mod attacks;
pub mod dataset;
pub mod experiment;
pub mod net;
pub mod train;
pub mod verifier;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::correlation::{OutputKind, OutputMatrix};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::probekit::{ProbeSet, RawImage};

pub use attacks::{adv_train, distill, extract, finetune, prune, train, transfer, ExtractMode};
pub use dataset::{gen_synthetic, Split, SyntheticSpec, ZooDataset, ZooSplits};
pub use net::{Arch, Params, Scope};
pub use train::TrainConfig;
pub use verifier::{verifier_from, EmbeddingVerifier};

/// Sub-seed for a named stream: first 8 bytes of SHA-256(seed || label).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Hasher::new();
    h.update(&seed.to_le_bytes()).update(label.as_bytes());
    let d = h.finish();
    u64::from_le_bytes(d.0[..8].try_into().unwrap())
}

/// How a model came to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lineage {
    Source,
    Irrelevant { seed: u64 },
    FinetuneAll,
    FinetuneLast,
    Pruned { p: f64 },
    ExtractLabel,
    ExtractProb { alpha: f64, temperature: f64 },
    ExtractAdv { epsilon: f64 },
    Distilled,
    AdvTrained { epsilon: f64 },
    Transferred { label_map: Vec<usize> },
}

impl Lineage {
    pub fn is_stolen(&self) -> bool {
        !matches!(self, Lineage::Source | Lineage::Irrelevant { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooModel {
    pub arch: Arch,
    pub params: Params,
    pub lineage: Lineage,
    pub train_seed: u64,
    /// File digest of the model this one was derived from.
    pub parent: Option<Digest>,
    /// Dead units of the last hidden layer (kept at zero through training).
    pub pruned: Vec<usize>,
    /// Cosine threshold when the model serves as a verifier.
    pub verifier_tau: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Arch,
    lineage: Lineage,
    train_seed: u64,
    #[serde(default)]
    parent: Option<Digest>,
    #[serde(default)]
    pruned: Vec<usize>,
    #[serde(default)]
    verifier_tau: Option<f64>,
}

pub const MODEL_MAGIC: &[u8; 4] = b"SACM";
const MODEL_VERSION: u16 = 1;
const BATCH: usize = 256;

impl ZooModel {
    /// Freshly initialized weights drawn from `seed`.
    pub fn init(arch: Arch, lineage: Lineage, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        Ok(ZooModel {
            params: Params::init(&arch, &mut rng),
            arch,
            lineage,
            train_seed: seed,
            parent: None,
            pruned: Vec::new(),
            verifier_tau: None,
        })
    }

    /// Copy that records `self` as its parent.
    pub(crate) fn derive(&self, lineage: Lineage, seed: u64) -> Self {
        ZooModel {
            lineage,
            train_seed: seed,
            parent: Some(self.digest()),
            verifier_tau: None,
            ..self.clone()
        }
    }

    pub(crate) fn reapply_pruning(&mut self) {
        if !self.pruned.is_empty() {
            net::zero_last_hidden_units(&mut self.params, &self.pruned);
        }
    }

    pub fn inputs(&self, images: &[&RawImage]) -> Result<Array2<f64>> {
        net::to_input(images, &self.arch)
    }

    fn batched(&self, x: &Array2<f64>, f: impl Fn(&net::Trace) -> Array2<f64>) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = (0..x.nrows())
            .step_by(BATCH)
            .map(|s| {
                let e = (s + BATCH).min(x.nrows());
                f(&net::forward(&self.arch, &self.params, net::row_range(x, s, e)))
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same widths")
    }

    pub fn logits_x(&self, x: &Array2<f64>) -> Array2<f64> {
        self.batched(x, |t| t.logits.clone())
    }

    pub fn embeddings_x(&self, x: &Array2<f64>) -> Array2<f64> {
        self.batched(x, |t| t.embedding().clone())
    }

    pub fn logits(&self, images: &[&RawImage]) -> Result<Array2<f64>> {
        Ok(self.logits_x(&self.inputs(images)?))
    }

    pub fn probabilities(&self, images: &[&RawImage]) -> Result<Array2<f64>> {
        Ok(net::softmax(&self.logits(images)?))
    }

    pub fn embeddings(&self, images: &[&RawImage]) -> Result<Array2<f64>> {
        Ok(self.embeddings_x(&self.inputs(images)?))
    }

    pub fn predict_x(&self, x: &Array2<f64>) -> Vec<usize> {
        argmax_rows(&self.logits_x(x))
    }

    pub fn predict(&self, images: &[&RawImage]) -> Result<Vec<usize>> {
        Ok(self.predict_x(&self.inputs(images)?))
    }

    pub fn accuracy(&self, data: &ZooDataset) -> Result<f64> {
        let pred = self.predict(&data.image_refs())?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// Model outputs on a probe set, rows in probe-id order.
    pub fn outputs(&self, probes: &ProbeSet, kind: OutputKind) -> Result<OutputMatrix> {
        let images: Vec<&RawImage> = probes.images().collect();
        let values = match kind {
            OutputKind::Probability => self.probabilities(&images)?,
            OutputKind::Logit => self.logits(&images)?,
            OutputKind::Bitvector => {
                return Err(Error::InvalidConfig("classifier outputs cannot be bitvectors".into()));
            }
        };
        OutputMatrix::new(values, kind, probes.digest())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.arch.clone(),
            lineage: self.lineage.clone(),
            train_seed: self.train_seed,
            parent: self.parent,
            pruned: self.pruned.clone(),
            verifier_tau: self.verifier_tau,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.u32(json.len() as u32).bytes(&json);
        for d in self.params.dense() {
            w.f64s(d.w.iter()).f64s(d.b.iter());
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(data, MODEL_MAGIC, "model")?;
        if version != MODEL_VERSION {
            return Err(Error::Parse(format!("model version {version} unsupported")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Parse(format!("model header: {e}")))?;
        header.arch.validate().map_err(|e| Error::Parse(format!("model header: {e}")))?;
        let mut params = Params {
            stem: None,
            layers: Vec::new(),
        };
        for (k, (rows, cols)) in header.arch.shapes().into_iter().enumerate() {
            let w = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?).expect("sized");
            let b = ndarray::Array1::from(r.f64s(cols)?);
            let d = net::Dense { w, b };
            if k == 0 && header.arch.stem.is_some() {
                params.stem = Some(d);
            } else {
                params.layers.push(d);
            }
        }
        r.expect_end()?;
        if !params.is_finite() {
            return Err(Error::Parse("model weights are not finite".into()));
        }
        let width = header.arch.embedding_dim();
        if header.pruned.iter().any(|&u| u >= width) {
            return Err(Error::Parse("pruned unit index out of range".into()));
        }
        Ok(ZooModel {
            arch: header.arch,
            params,
            lineage: header.lineage,
            train_seed: header.train_seed,
            parent: header.parent,
            pruned: header.pruned,
            verifier_tau: header.verifier_tau,
        })
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

pub fn argmax_rows(z: &Array2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_file_roundtrip() {
        let mut m = ZooModel::init(Arch::conv(5), Lineage::Pruned { p: 0.25 }, 11).unwrap();
        m.pruned = vec![2, 7];
        m.verifier_tau = Some(0.5);
        m.parent = Some(Digest::of(b"parent"));
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"SACM");
        assert_eq!(ZooModel::from_bytes(&b).unwrap(), m);
        assert!(ZooModel::from_bytes(&b[..b.len() - 8]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(ZooModel::from_bytes(&extra).is_err());
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let z = ndarray::array![[0.0, 2.0, 2.0], [5.0, 1.0, 0.0]];
        assert_eq!(argmax_rows(&z), vec![1, 0]);
    }
}

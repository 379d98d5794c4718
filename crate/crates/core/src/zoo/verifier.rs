//! Same/different verifiers built from a classifier's penultimate embedding.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, ZooDataset, ZooModel};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::fri::{PairQuery, Verifier};
use crate::probekit::RawImage;

/// Cosine of two embeddings; two zero vectors count as identical and a zero
/// vector against a nonzero one as orthogonal.
pub fn embedding_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Verifier answering 1 iff `cos(embed(a), embed(b)) >= tau`.
pub struct EmbeddingVerifier {
    model: ZooModel,
    tau: f64,
    cache: Mutex<HashMap<Digest, Vec<f64>>>,
}

impl EmbeddingVerifier {
    pub fn new(model: ZooModel, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau <= 1.0) {
            return Err(Error::Calibration(format!("threshold {tau} out of range")));
        }
        let mut model = model;
        model.verifier_tau = Some(tau);
        Ok(EmbeddingVerifier {
            model,
            tau,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Use the threshold stored in the model file.
    pub fn from_model(model: ZooModel) -> Result<Self> {
        let tau = model
            .verifier_tau
            .ok_or_else(|| Error::Calibration("model carries no verifier threshold".into()))?;
        Self::new(model, tau)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn model(&self) -> &ZooModel {
        &self.model
    }

    fn embed(&self, img: &RawImage) -> Result<Vec<f64>> {
        let key = img.digest();
        if let Some(e) = self.cache.lock().unwrap().get(&key) {
            return Ok(e.clone());
        }
        let e = self.model.embeddings(&[img])?.row(0).to_vec();
        self.cache.lock().unwrap().insert(key, e.clone());
        Ok(e)
    }

    /// Embed `images` in one batch and cache the results.
    pub fn warm(&self, images: &[RawImage]) -> Result<()> {
        let refs: Vec<&RawImage> = images.iter().collect();
        let emb = self.model.embeddings(&refs)?;
        let mut cache = self.cache.lock().unwrap();
        for (img, row) in images.iter().zip(emb.rows()) {
            cache.insert(img.digest(), row.to_vec());
        }
        Ok(())
    }

    pub fn score(&self, a: &RawImage, b: &RawImage) -> Result<f64> {
        Ok(embedding_cosine(&self.embed(a)?, &self.embed(b)?))
    }

    pub fn verify_pair(&self, a: &RawImage, b: &RawImage) -> Result<u8> {
        Ok(u8::from(self.score(a, b)? >= self.tau))
    }
}

impl Verifier for EmbeddingVerifier {
    fn verify(&self, q: &PairQuery<'_>) -> Result<u8> {
        self.verify_pair(q.target, q.reference)
    }
}

/// (false-accept rate, false-reject rate) at threshold `tau`.
pub fn far_frr(same: &[f64], different: &[f64], tau: f64) -> (f64, f64) {
    let far = different.iter().filter(|&&s| s >= tau).count() as f64 / different.len().max(1) as f64;
    let frr = same.iter().filter(|&&s| s < tau).count() as f64 / same.len().max(1) as f64;
    (far, frr)
}

pub const MIN_CALIBRATION_PAIRS: usize = 10;

/// Equal-error-rate threshold: the observed score minimizing |FAR - FRR|
/// (ties go to the smaller of the two rates' maximum, then the lower score).
pub fn calibrate_eer(same: &[f64], different: &[f64]) -> Result<f64> {
    if same.len() < MIN_CALIBRATION_PAIRS || different.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::Calibration(format!(
            "need {MIN_CALIBRATION_PAIRS} same and different pairs, got {} and {}",
            same.len(),
            different.len()
        )));
    }
    let mut candidates: Vec<f64> = same.iter().chain(different).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::INFINITY, f64::INFINITY, candidates[0]);
    for &tau in &candidates {
        let (far, frr) = far_frr(same, different, tau);
        let key = ((far - frr).abs(), far.max(frr));
        if key < (best.0, best.1) {
            best = (key.0, key.1, tau);
        }
    }
    Ok(best.2)
}

/// Seeded same-label and different-label index pairs.
pub fn sample_pairs(data: &ZooDataset, count: usize, seed: u64) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class: Vec<Vec<usize>> = (0..data.classes).map(|k| data.indices_of(k)).collect();
    let usable: Vec<usize> = (0..data.classes).filter(|&k| by_class[k].len() >= 2).collect();
    let mut same = Vec::with_capacity(count);
    let mut diff = Vec::with_capacity(count);
    if usable.is_empty() || data.classes < 2 {
        return (same, diff);
    }
    while same.len() < count {
        let k = usable[rng.gen_range(0..usable.len())];
        let c = &by_class[k];
        let i = rng.gen_range(0..c.len());
        let j = (i + rng.gen_range(1..c.len())) % c.len();
        same.push((c[i], c[j]));
    }
    while diff.len() < count {
        let i = rng.gen_range(0..data.len());
        let j = rng.gen_range(0..data.len());
        if data.labels[i] != data.labels[j] {
            diff.push((i, j));
        }
    }
    (same, diff)
}

/// Build a verifier from `model`, calibrating `tau` at the equal-error rate on
/// `pairs` same and `pairs` different pairs drawn from `holdout`.
pub fn verifier_from(model: &ZooModel, holdout: &ZooDataset, pairs: usize, seed: u64) -> Result<EmbeddingVerifier> {
    if model.arch.hidden.is_empty() {
        return Err(Error::Calibration("model has no penultimate layer".into()));
    }
    let (same, diff) = sample_pairs(holdout, pairs, derive_seed(seed, "pairs"));
    let emb = model.embeddings(&holdout.image_refs())?;
    let score = |&(i, j): &(usize, usize)| {
        embedding_cosine(
            emb.row(i).as_slice().expect("contiguous"),
            emb.row(j).as_slice().expect("contiguous"),
        )
    };
    let s: Vec<f64> = same.iter().map(score).collect();
    let d: Vec<f64> = diff.iter().map(score).collect();
    EmbeddingVerifier::new(model.clone(), calibrate_eer(&s, &d)?)
}

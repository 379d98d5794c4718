//! Features from reference images (FRI) for same/different verifiers.
//!
//! A verifier only answers "same identity?" for an image pair, so it has no
//! output vector to correlate. For each identity group the JPEG-compressed
//! target is paired with every reference image and the 0/1 answers form the
//! row; the rows over all groups make a bitvector [`OutputMatrix`] that goes
//! through the usual cosine fingerprint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_matrix, CorrelationMatrix, KernelSpec, OutputKind, OutputMatrix};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::probekit::{jpeg_roundtrip, RawImage};

pub const DEFAULT_TARGETS: usize = 50;
pub const DEFAULT_REFERENCES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityGroup {
    identity_id: String,
    target: RawImage,
    references: Vec<RawImage>,
}

impl IdentityGroup {
    pub fn new(identity_id: impl Into<String>, target: RawImage, references: Vec<RawImage>) -> Result<Self> {
        let identity_id = identity_id.into();
        if references.is_empty() {
            return Err(Error::InvalidConfig(format!("identity {identity_id} has no references")));
        }
        if references.iter().any(|r| *r == target) {
            return Err(Error::InvalidConfig(format!(
                "identity {identity_id}: target image is also a reference"
            )));
        }
        Ok(IdentityGroup {
            identity_id,
            target,
            references,
        })
    }

    pub fn identity_id(&self) -> &str {
        &self.identity_id
    }

    pub fn target(&self) -> &RawImage {
        &self.target
    }

    pub fn references(&self) -> &[RawImage] {
        &self.references
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

/// One verifier query: the compressed target against a reference.
pub struct PairQuery<'a> {
    pub identity_id: &'a str,
    pub ref_index: usize,
    pub target: &'a RawImage,
    pub reference: &'a RawImage,
}

/// Black-box same/different oracle. Answers must be 0 or 1; anything else is
/// a protocol violation.
pub trait Verifier: Send + Sync {
    fn verify(&self, query: &PairQuery<'_>) -> Result<u8>;

    /// Whether `verify` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<F> Verifier for F
where
    F: Fn(&RawImage, &RawImage) -> u8 + Send + Sync,
{
    fn verify(&self, q: &PairQuery<'_>) -> Result<u8> {
        Ok(self(q.target, q.reference))
    }
}

/// Memoizes answers per (target digest, reference digest).
pub struct CachedVerifier<V> {
    inner: V,
    cache: Mutex<HashMap<(Digest, Digest), u8>>,
}

impl<V: Verifier> CachedVerifier<V> {
    pub fn new(inner: V) -> Self {
        CachedVerifier {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl<V: Verifier> Verifier for CachedVerifier<V> {
    fn verify(&self, q: &PairQuery<'_>) -> Result<u8> {
        let key = (q.target.digest(), q.reference.digest());
        if let Some(&bit) = self.cache.lock().unwrap().get(&key) {
            return Ok(bit);
        }
        let bit = self.inner.verify(q)?;
        self.cache.lock().unwrap().insert(key, bit);
        Ok(bit)
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}

/// Recorded answers keyed by (identity, reference index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnswerTable {
    answers: HashMap<(String, usize), i64>,
}

#[derive(Serialize, Deserialize)]
struct AnswerRow {
    identity_id: String,
    ref_index: usize,
    bit: i64,
}

impl AnswerTable {
    pub fn insert(&mut self, identity_id: impl Into<String>, ref_index: usize, bit: i64) {
        self.answers.insert((identity_id.into(), ref_index), bit);
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Query `verifier` on every pair and record the answers.
    pub fn record(groups: &[IdentityGroup], verifier: &dyn Verifier, quality: u8) -> Result<Self> {
        let mut table = AnswerTable::default();
        for g in groups {
            let f = fri_feature(g, verifier, quality)?;
            for (k, &b) in f.bits.iter().enumerate() {
                table.insert(g.identity_id.clone(), k, i64::from(b));
            }
        }
        Ok(table)
    }

    /// `identity_id,ref_index,bit` with a header row.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut table = AnswerTable::default();
        for row in rdr.deserialize::<AnswerRow>() {
            let row = row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            table.insert(row.identity_id, row.ref_index, row.bit);
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut keys: Vec<_> = self.answers.keys().collect();
        keys.sort();
        for k in keys {
            w.serialize(AnswerRow {
                identity_id: k.0.clone(),
                ref_index: k.1,
                bit: self.answers[k],
            })
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl Verifier for AnswerTable {
    fn verify(&self, q: &PairQuery<'_>) -> Result<u8> {
        match self.answers.get(&(q.identity_id.to_string(), q.ref_index)) {
            Some(&b) if b == 0 || b == 1 => Ok(b as u8),
            Some(&b) => Err(Error::ProtocolViolation(format!(
                "answer for ({}, {}) is {b}, not 0/1",
                q.identity_id, q.ref_index
            ))),
            None => Err(Error::ProtocolViolation(format!(
                "no recorded answer for ({}, {})",
                q.identity_id, q.ref_index
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FriFeature {
    pub identity_id: String,
    pub bits: Vec<u8>,
}

/// Verifier answers for the compressed target against each reference, in
/// reference order.
pub fn fri_feature(group: &IdentityGroup, verifier: &dyn Verifier, quality: u8) -> Result<FriFeature> {
    let target = jpeg_roundtrip(&group.target, quality)?;
    let bits = group
        .references
        .iter()
        .enumerate()
        .map(|(k, reference)| {
            let q = PairQuery {
                identity_id: &group.identity_id,
                ref_index: k,
                target: &target,
                reference,
            };
            match verifier.verify(&q)? {
                b @ (0 | 1) => Ok(b),
                other => Err(Error::ProtocolViolation(format!(
                    "verifier returned {other} for ({}, {k})",
                    group.identity_id
                ))),
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(FriFeature {
        identity_id: group.identity_id.clone(),
        bits,
    })
}

/// Content address of a group list at a given quality; stands in for the
/// probe digest of FRI output matrices.
pub fn groups_digest(groups: &[IdentityGroup], quality: u8) -> Digest {
    let mut h = Hasher::new();
    h.update(b"fri-groups-v1").update(&[quality]);
    for g in groups {
        h.update(&(g.identity_id.len() as u64).to_le_bytes())
            .update(g.identity_id.as_bytes())
            .update(g.target.digest().as_bytes())
            .update(&(g.references.len() as u64).to_le_bytes());
        for r in &g.references {
            h.update(r.digest().as_bytes());
        }
    }
    h.finish()
}

/// Stack the FRI features of every group into a bitvector output matrix.
pub fn fri_output_matrix(groups: &[IdentityGroup], verifier: &dyn Verifier, quality: u8) -> Result<OutputMatrix> {
    if groups.len() < 2 {
        return Err(Error::InsufficientRows {
            needed: 2,
            got: groups.len(),
        });
    }
    let n = groups[0].len();
    if let Some(g) = groups.iter().find(|g| g.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "identity {} has {} references, expected {n}",
            g.identity_id,
            g.len()
        )));
    }
    let features: Vec<FriFeature> = if verifier.concurrent() {
        groups
            .par_iter()
            .map(|g| fri_feature(g, verifier, quality))
            .collect::<Result<_>>()?
    } else {
        groups
            .iter()
            .map(|g| fri_feature(g, verifier, quality))
            .collect::<Result<_>>()?
    };
    let mut values = Array2::zeros((groups.len(), n));
    for (m, f) in features.iter().enumerate() {
        for (k, &b) in f.bits.iter().enumerate() {
            values[[m, k]] = f64::from(b);
        }
    }
    OutputMatrix::new(values, OutputKind::Bitvector, groups_digest(groups, quality))
}

/// Cosine fingerprint of a verifier over the groups.
pub fn fri_fingerprint(groups: &[IdentityGroup], verifier: &dyn Verifier, quality: u8) -> Result<CorrelationMatrix> {
    correlation_matrix(&fri_output_matrix(groups, verifier, quality)?, KernelSpec::Cosine)
}

// ---------------------------------------------------------------------------
// group manifest

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    file: String,
    width: usize,
    height: usize,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    identity_id: String,
    target: ImageEntry,
    references: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupManifest {
    version: u32,
    groups: Vec<GroupEntry>,
}

const GROUPS_FILE: &str = "groups.json";

fn write_image(dir: &Path, file: String, img: &RawImage) -> Result<ImageEntry> {
    let path = dir.join(&file);
    fs::write(&path, img.pixels()).map_err(|e| Error::io(&path, e))?;
    Ok(ImageEntry {
        file,
        width: img.width(),
        height: img.height(),
        channels: img.channels(),
    })
}

fn read_image(dir: &Path, e: &ImageEntry) -> Result<RawImage> {
    if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
        return Err(Error::Parse(format!("illegal pixel file name {:?}", e.file)));
    }
    let path = dir.join(&e.file);
    let px = fs::read(&path).map_err(|err| Error::io(&path, err))?;
    RawImage::new(e.width, e.height, e.channels, px).map_err(|err| Error::Parse(format!("{}: {err}", path.display())))
}

/// Write `groups.json` plus raw pixel files into `dir`.
pub fn save_groups(groups: &[IdentityGroup], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(groups.len());
    for (m, g) in groups.iter().enumerate() {
        let target = write_image(dir, format!("g{m:04}_target.raw"), &g.target)?;
        let references = g
            .references
            .iter()
            .enumerate()
            .map(|(k, r)| write_image(dir, format!("g{m:04}_ref{k:04}.raw"), r))
            .collect::<Result<_>>()?;
        entries.push(GroupEntry {
            identity_id: g.identity_id.clone(),
            target,
            references,
        });
    }
    let manifest = GroupManifest {
        version: 1,
        groups: entries,
    };
    let path = dir.join(GROUPS_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("serializes")).map_err(|e| Error::io(&path, e))
}

pub fn load_groups(dir: impl AsRef<Path>) -> Result<Vec<IdentityGroup>> {
    let dir = dir.as_ref();
    let path = dir.join(GROUPS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: GroupManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.version != 1 {
        return Err(Error::Parse(format!("unsupported group manifest version {}", manifest.version)));
    }
    manifest
        .groups
        .iter()
        .map(|g| {
            let target = read_image(dir, &g.target)?;
            let refs = g.references.iter().map(|r| read_image(dir, r)).collect::<Result<_>>()?;
            IdentityGroup::new(g.identity_id.clone(), target, refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::fingerprint_distance;

    fn img(seed: u32) -> RawImage {
        let mut px: Vec<u8> = (0..16 * 16 * 3u32)
            .map(|i| (i.wrapping_mul(seed | 1).wrapping_add(seed) >> 3) as u8)
            .collect();
        px[..4].copy_from_slice(&seed.to_le_bytes());
        RawImage::new(16, 16, 3, px).unwrap()
    }

    fn groups(num: usize, n: usize) -> Vec<IdentityGroup> {
        (0..num)
            .map(|m| {
                let refs = (0..n).map(|k| img((m * 1000 + k + 1) as u32)).collect();
                IdentityGroup::new(format!("id{m}"), img(900_000 + m as u32), refs).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_verifier_gives_ones() {
        let g = &groups(1, 5)[0];
        let f = fri_feature(g, &|_: &RawImage, _: &RawImage| 1u8, 10).unwrap();
        assert_eq!(f.bits, vec![1; 5]);
    }

    #[test]
    fn equality_verifier_gives_zeros() {
        let g = &groups(1, 6)[0];
        let eq = |a: &RawImage, b: &RawImage| u8::from(a == b);
        let f = fri_feature(g, &eq, 10).unwrap();
        assert_eq!(f.bits, vec![0; 6]);
    }

    #[test]
    fn non_binary_answer_is_rejected() {
        let g = &groups(1, 2)[0];
        let bad = |_: &RawImage, _: &RawImage| 2u8;
        assert!(matches!(fri_feature(g, &bad, 10), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn fifty_by_fifty_feature_and_matrix() {
        let gs = groups(50, 50);
        let v = |a: &RawImage, b: &RawImage| (a.pixels()[0] ^ b.pixels()[3]) & 1;
        let f = fri_feature(&gs[0], &v, 10).unwrap();
        assert_eq!(f.bits.len(), 50);
        let o = fri_output_matrix(&gs, &v, 10).unwrap();
        assert_eq!((o.rows(), o.dims()), (50, 50));
        assert_eq!(o.kind(), OutputKind::Bitvector);
        let c = correlation_matrix(&o, KernelSpec::Cosine).unwrap();
        assert_eq!(c.n(), 50);
    }

    #[test]
    fn inconsistent_reference_counts() {
        let mut gs = groups(2, 3);
        gs.push(groups(1, 4).remove(0));
        let one = |_: &RawImage, _: &RawImage| 1u8;
        assert!(matches!(fri_output_matrix(&gs, &one, 10), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn answer_table_replays_verifier() {
        let gs = groups(4, 5);
        let v = |a: &RawImage, b: &RawImage| (a.pixels()[5] < b.pixels()[9]) as u8;
        let table = AnswerTable::record(&gs, &v, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.csv");
        table.write_csv(&path).unwrap();
        let back = AnswerTable::read_csv(&path).unwrap();
        assert_eq!(back, table);
        assert_eq!(
            fri_output_matrix(&gs, &v, 10).unwrap(),
            fri_output_matrix(&gs, &back, 10).unwrap()
        );
    }

    #[test]
    fn cache_deduplicates_queries() {
        let mut gs = groups(2, 3);
        // same target and references under a second identity
        gs.push(IdentityGroup::new("dup", gs[0].target.clone(), gs[0].references.clone()).unwrap());
        let v = CachedVerifier::new(|_: &RawImage, _: &RawImage| 1u8);
        fri_output_matrix(&gs, &v, 10).unwrap();
        assert_eq!(v.cached(), 6);
    }

    #[test]
    fn complementary_verifiers_hand_check() {
        // 3 identities x 4 references; verifier B answers the complement of A
        let gs = groups(3, 4);
        let pattern = [[1u8, 1, 0, 0], [1, 0, 1, 0], [1, 1, 1, 0]];
        let mut a = AnswerTable::default();
        let mut b = AnswerTable::default();
        for (m, row) in pattern.iter().enumerate() {
            for (k, &bit) in row.iter().enumerate() {
                a.insert(format!("id{m}"), k, i64::from(bit));
                b.insert(format!("id{m}"), k, i64::from(1 - bit));
            }
        }
        let ca = fri_fingerprint(&gs, &a, 10).unwrap();
        let cb = fri_fingerprint(&gs, &b, 10).unwrap();
        // A rows: (1,1,0,0), (1,0,1,0), (1,1,1,0)
        //   cos01 = 1/2, cos02 = 2/sqrt(6), cos12 = 2/sqrt(6)
        // B rows: (0,0,1,1), (0,1,0,1), (0,0,0,1)
        //   cos01 = 1/2, cos02 = 1/sqrt(2), cos12 = 1/sqrt(2)
        let expected = 4.0 * (2.0 / 6f64.sqrt() - 1.0 / 2f64.sqrt()) / 9.0;
        let d = fingerprint_distance(&ca, &cb).unwrap().value;
        assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        assert!(d > 0.0);
    }

    #[test]
    fn common_reference_permutation_keeps_distance() {
        let gs = groups(5, 6);
        let va = |a: &RawImage, b: &RawImage| (a.pixels()[1] ^ b.pixels()[2]) & 1;
        let vb = |a: &RawImage, b: &RawImage| (a.pixels()[7] < b.pixels()[4]) as u8;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<IdentityGroup> = gs
            .iter()
            .map(|g| {
                let refs = perm.iter().map(|&k| g.references[k].clone()).collect();
                IdentityGroup::new(g.identity_id.clone(), g.target.clone(), refs).unwrap()
            })
            .collect();
        let d1 = fingerprint_distance(&fri_fingerprint(&gs, &va, 10).unwrap(), &fri_fingerprint(&gs, &vb, 10).unwrap()).unwrap();
        let d2 = fingerprint_distance(
            &fri_fingerprint(&permuted, &va, 10).unwrap(),
            &fri_fingerprint(&permuted, &vb, 10).unwrap(),
        )
        .unwrap();
        assert!((d1.value - d2.value).abs() < 1e-12);
    }

    #[test]
    fn group_manifest_roundtrip() {
        let gs = groups(3, 4);
        let dir = tempfile::tempdir().unwrap();
        save_groups(&gs, dir.path()).unwrap();
        assert_eq!(load_groups(dir.path()).unwrap(), gs);
    }

    #[test]
    fn target_must_not_be_a_reference() {
        let t = img(3);
        assert!(IdentityGroup::new("x", t.clone(), vec![img(4), t]).is_err());
        assert!(IdentityGroup::new("x", img(3), vec![]).is_err());
    }
}

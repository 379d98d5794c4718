//! On-disk probe set: `manifest.json` plus one raw pixel file per probe.
//!
//! The manifest digest is SHA-256 over the pixel files concatenated in id
//! order, followed by the canonical JSON of the manifest metadata (the
//! manifest with its `manifest_digest` field removed).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corruption, ProbeImage, ProbeSet, RawImage};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct ProbeEntry {
    id: usize,
    width: usize,
    height: usize,
    channels: usize,
    source_digest: Digest,
    pixel_file: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct ManifestMeta {
    version: u32,
    seed: u64,
    /// JPEG quality, or `null` for uncompressed probes.
    quality: Option<u8>,
    n: usize,
    probes: Vec<ProbeEntry>,
}

#[derive(Serialize, Deserialize, Debug)]
struct ManifestFile {
    #[serde(flatten)]
    meta: ManifestMeta,
    manifest_digest: Digest,
}

fn pixel_file_name(id: usize) -> String {
    format!("probe_{id:05}.raw")
}

fn meta_for(probes: &[ProbeImage], seed: u64, corruption: Corruption) -> ManifestMeta {
    ManifestMeta {
        version: MANIFEST_VERSION,
        seed,
        quality: corruption.quality(),
        n: probes.len(),
        probes: probes
            .iter()
            .map(|p| ProbeEntry {
                id: p.id,
                width: p.image.width(),
                height: p.image.height(),
                channels: p.image.channels(),
                source_digest: p.source_digest,
                pixel_file: pixel_file_name(p.id),
            })
            .collect(),
    }
}

fn digest_of<'a>(pixels: impl Iterator<Item = &'a [u8]>, meta: &ManifestMeta) -> Digest {
    let mut h = Hasher::new();
    for px in pixels {
        h.update(px);
    }
    h.update(&serde_json::to_vec(meta).expect("manifest metadata serializes"));
    h.finish()
}

pub(super) fn compute_digest(probes: &[ProbeImage], seed: u64, corruption: Corruption) -> Digest {
    let meta = meta_for(probes, seed, corruption);
    digest_of(probes.iter().map(|p| p.image.pixels()), &meta)
}

pub fn save_probe_set(set: &ProbeSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = meta_for(set.probes(), set.seed(), set.corruption());
    for (p, entry) in set.probes().iter().zip(&meta.probes) {
        let path = dir.join(&entry.pixel_file);
        fs::write(&path, p.image.pixels()).map_err(|e| Error::io(&path, e))?;
    }
    let file = ManifestFile {
        meta,
        manifest_digest: set.digest(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&file).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_probe_set(dir: impl AsRef<Path>) -> Result<ProbeSet> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let meta = file.meta;
    if meta.version != MANIFEST_VERSION {
        return Err(Error::Parse(format!("unsupported manifest version {}", meta.version)));
    }
    if meta.n != meta.probes.len() || meta.n == 0 {
        return Err(Error::Parse(format!(
            "manifest declares n={} but lists {} probes",
            meta.n,
            meta.probes.len()
        )));
    }
    let corruption = match meta.quality {
        None => Corruption::None,
        Some(q) => Corruption::jpeg(q)?,
    };

    let mut probes = Vec::with_capacity(meta.n);
    for (i, entry) in meta.probes.iter().enumerate() {
        if entry.id != i {
            return Err(Error::Parse(format!("probe ids out of order at position {i}")));
        }
        if entry.pixel_file.contains(['/', '\\']) || entry.pixel_file.starts_with('.') {
            return Err(Error::Parse(format!("illegal pixel file name {:?}", entry.pixel_file)));
        }
        let ppath = dir.join(&entry.pixel_file);
        let px = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected = entry.width * entry.height * entry.channels;
        if px.len() != expected {
            return Err(Error::Parse(format!(
                "{}: {} bytes, expected {expected}",
                ppath.display(),
                px.len()
            )));
        }
        let image = RawImage::new(entry.width, entry.height, entry.channels, px)
            .map_err(|e| Error::Parse(format!("{}: {e}", ppath.display())))?;
        probes.push(ProbeImage {
            id: entry.id,
            image,
            corruption,
            source_digest: entry.source_digest,
        });
    }

    let recomputed = digest_of(probes.iter().map(|p| p.image.pixels()), &meta);
    if recomputed != file.manifest_digest {
        return Err(Error::Integrity(format!(
            "manifest digest {} does not match contents ({})",
            file.manifest_digest.short(),
            recomputed.short()
        )));
    }
    ProbeSet::from_probes(probes, meta.seed, corruption)
}

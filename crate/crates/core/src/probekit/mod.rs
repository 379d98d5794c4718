//! Probe construction: raw images, JPEG corruption and the content-addressed
//! probe manifest.

pub mod jpeg;
mod manifest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Result};

pub use manifest::{load_probe_set, save_probe_set, MANIFEST_VERSION};

/// Default compression strength for probes.
pub const DEFAULT_QUALITY: u8 = 10;
/// Default number of probes.
pub const DEFAULT_PROBE_COUNT: usize = 50;

/// 8-bit image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RawImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RawImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} is smaller than one 8x8 block"
            )));
        }
        if width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::InvalidImage(format!("{width}x{height} exceeds 65535")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (expected 1 or 3)")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn same_shape(&self, other: &RawImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Content hash over shape and pixels.
    pub fn digest(&self) -> Digest {
        let mut h = crate::digest::Hasher::new();
        h.update(&(self.width as u64).to_le_bytes())
            .update(&(self.height as u64).to_le_bytes())
            .update(&(self.channels as u64).to_le_bytes())
            .update(&self.pixels);
        h.finish()
    }

    /// Expand a grayscale image to three identical channels.
    pub fn to_rgb(&self) -> RawImage {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&p| [p, p, p]).collect();
        RawImage {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels,
        }
    }
}

/// Corruption applied to a clean image to form a probe. Only JPEG is
/// implemented; `None` yields the uncompressed ("clean") probe variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Corruption {
    None,
    Jpeg { quality: u8 },
}

impl Corruption {
    pub fn jpeg(quality: u8) -> Result<Self> {
        jpeg::check_quality(quality)?;
        Ok(Corruption::Jpeg { quality })
    }

    pub fn apply(&self, image: &RawImage) -> Result<RawImage> {
        match *self {
            Corruption::None => Ok(image.clone()),
            Corruption::Jpeg { quality } => jpeg_roundtrip(image, quality),
        }
    }

    pub fn quality(&self) -> Option<u8> {
        match *self {
            Corruption::None => None,
            Corruption::Jpeg { quality } => Some(quality),
        }
    }
}

/// Compress and decompress with baseline JPEG at `quality`.
pub fn jpeg_roundtrip(image: &RawImage, quality: u8) -> Result<RawImage> {
    jpeg::roundtrip(image, quality)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeImage {
    pub id: usize,
    pub image: RawImage,
    pub corruption: Corruption,
    pub source_digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSet {
    probes: Vec<ProbeImage>,
    seed: u64,
    corruption: Corruption,
    manifest_digest: Digest,
}

impl ProbeSet {
    /// Assemble a probe set from already-corrupted probes; ids must be 0..n.
    pub fn from_probes(probes: Vec<ProbeImage>, seed: u64, corruption: Corruption) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::InvalidConfig("a probe set needs at least one probe".into()));
        }
        if let Some(p) = probes.iter().enumerate().find(|(i, p)| p.id != *i) {
            return Err(Error::InvalidConfig(format!(
                "probe ids must be 0..n in order; found id {} at position {}",
                p.1.id, p.0
            )));
        }
        let manifest_digest = manifest::compute_digest(&probes, seed, corruption);
        Ok(ProbeSet {
            probes,
            seed,
            corruption,
            manifest_digest,
        })
    }

    pub fn probes(&self) -> &[ProbeImage] {
        &self.probes
    }

    pub fn images(&self) -> impl Iterator<Item = &RawImage> {
        self.probes.iter().map(|p| &p.image)
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn corruption(&self) -> Corruption {
        self.corruption
    }

    pub fn digest(&self) -> Digest {
        self.manifest_digest
    }

    /// First `count` probes as a new, separately addressed set.
    pub fn prefix(&self, count: usize) -> Result<ProbeSet> {
        if count == 0 || count > self.len() {
            return Err(Error::InsufficientImages {
                requested: count,
                available: self.len(),
            });
        }
        ProbeSet::from_probes(self.probes[..count].to_vec(), self.seed, self.corruption)
    }
}

/// Indices of `count` items drawn without replacement from `0..len`.
///
/// Partial Fisher-Yates driven by ChaCha8 (`rand_chacha`) seeded with
/// `seed_from_u64(seed)`; position `i` swaps with `i + gen_range(0..len-i)`.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..count.min(len) {
        let j = i + rng.gen_range(0..len - i);
        idx.swap(i, j);
    }
    idx.truncate(count.min(len));
    idx
}

/// Sample `count` clean images with `seed` and corrupt each one.
pub fn build_probe_set_with(
    images: &[RawImage],
    count: usize,
    corruption: Corruption,
    seed: u64,
) -> Result<ProbeSet> {
    if count == 0 || count > images.len() {
        return Err(Error::InsufficientImages {
            requested: count,
            available: images.len(),
        });
    }
    let picked = sample_indices(images.len(), count, seed);
    let probes = picked
        .par_iter()
        .enumerate()
        .map(|(id, &src)| {
            let raw = &images[src];
            Ok(ProbeImage {
                id,
                image: corruption.apply(raw)?,
                corruption,
                source_digest: raw.digest(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProbeSet::from_probes(probes, seed, corruption)
}

/// Decode every PNG, JPEG or BMP file in `dir` (sorted by file name).
/// Grayscale files stay single-channel; everything else becomes RGB.
pub fn load_image_dir(dir: impl AsRef<std::path::Path>) -> Result<Vec<RawImage>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            matches!(ext.as_str(), "png" | "jpg" | "jpeg" | "bmp")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = image::open(p).map_err(|e| Error::InvalidImage(format!("{}: {e}", p.display())))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            if img.color().channel_count() <= 2 {
                RawImage::new(w, h, 1, img.into_luma8().into_raw())
            } else {
                RawImage::new(w, h, 3, img.into_rgb8().into_raw())
            }
        })
        .collect()
}

/// JPEG probe set at `quality`.
pub fn build_probe_set(images: &[RawImage], count: usize, quality: u8, seed: u64) -> Result<ProbeSet> {
    build_probe_set_with(images, count, Corruption::jpeg(quality)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_images(n: usize, seed: u64) -> Vec<RawImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let px = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
                RawImage::new(16, 16, 3, px).unwrap()
            })
            .collect()
    }

    #[test]
    fn raw_image_validation() {
        assert!(RawImage::new(8, 8, 2, vec![0; 128]).is_err());
        assert!(RawImage::new(8, 8, 1, vec![0; 63]).is_err());
        assert!(RawImage::new(8, 7, 1, vec![0; 56]).is_err());
        assert!(RawImage::new(8, 8, 1, vec![0; 64]).is_ok());
    }

    #[test]
    fn probe_set_is_deterministic() {
        let imgs = noise_images(60, 1);
        let a = build_probe_set(&imgs, 50, 10, 7).unwrap();
        let b = build_probe_set(&imgs, 50, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.len(), 50);
        assert!(a.probes().iter().enumerate().all(|(i, p)| p.id == i));
    }

    #[test]
    fn different_seeds_pick_different_sources() {
        let imgs = noise_images(60, 2);
        let a = build_probe_set(&imgs, 25, 10, 1).unwrap();
        let b = build_probe_set(&imgs, 25, 10, 2).unwrap();
        let sa: Vec<_> = a.probes().iter().map(|p| p.source_digest).collect();
        let sb: Vec<_> = b.probes().iter().map(|p| p.source_digest).collect();
        assert_ne!(sa, sb);
    }

    #[test]
    fn seeded_shuffles_of_fifty_items_differ() {
        // brute force over many seed pairs: two seeded draws are never equal
        for s in 0..200u64 {
            assert_ne!(sample_indices(50, 25, s), sample_indices(50, 25, s + 1000));
        }
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut got = sample_indices(40, 40, 3);
        got.sort_unstable();
        assert_eq!(got, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn insufficient_images() {
        let imgs = noise_images(3, 3);
        assert!(matches!(
            build_probe_set(&imgs, 4, 10, 0),
            Err(Error::InsufficientImages { requested: 4, available: 3 })
        ));
        assert!(build_probe_set(&imgs, 0, 10, 0).is_err());
        assert!(matches!(build_probe_set(&imgs, 2, 0, 0), Err(Error::InvalidQuality(0))));
    }

    #[test]
    fn clean_probes_are_untouched() {
        let imgs = noise_images(5, 4);
        let set = build_probe_set_with(&imgs, 5, Corruption::None, 9).unwrap();
        for p in set.probes() {
            assert_eq!(p.image.digest(), p.source_digest);
        }
    }
}

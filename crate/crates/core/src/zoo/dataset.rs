//! Zoo datasets: a seeded synthetic generator and CIFAR-10 binary batches.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};
use crate::probekit::RawImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Defender,
    Attacker,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Defender => "defender",
            Split::Attacker => "attacker",
            Split::Test => "test",
        }
    }
}

/// Knobs of the synthetic generator. Each class owns a few random sinusoidal
/// gratings per channel; a sample is its class template, partly blended with
/// another class, circularly shifted, plus Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    /// Training images per class, split evenly between defender and attacker.
    pub per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub gratings: usize,
    pub max_frequency: usize,
    /// Template amplitude in pixel units.
    pub amplitude: f64,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
    /// Upper bound of the blend weight toward a random other class.
    pub max_blend: f64,
    /// Fraction of samples blended close to 50/50 with another class, where
    /// the label is barely recoverable from the pixels.
    pub ambiguous: f64,
    pub max_shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            classes: 10,
            per_class: 500,
            test_per_class: 100,
            size: 32,
            gratings: 3,
            max_frequency: 5,
            amplitude: 80.0,
            noise: 16.0,
            max_blend: 0.45,
            ambiguous: 0.3,
            max_shift: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Synthetic(SyntheticSpec),
    CifarBinary { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooDataset {
    pub images: Vec<RawImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub generator: Generator,
}

impl ZooDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&RawImage> {
        self.images.iter().collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Same images with labels passed through `map`.
    pub fn relabel(&self, map: &[usize]) -> Result<ZooDataset> {
        if map.len() != self.classes {
            return Err(Error::InvalidConfig(format!(
                "label map has {} entries for {} classes",
                map.len(),
                self.classes
            )));
        }
        let classes = map.iter().max().map_or(0, |m| m + 1);
        Ok(ZooDataset {
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| map[l]).collect(),
            classes,
            split: self.split,
            generator: self.generator.clone(),
        })
    }

    /// Indices of the images of class `k`, in dataset order.
    pub fn indices_of(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == k).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooSplits {
    pub defender: ZooDataset,
    pub attacker: ZooDataset,
    pub test: ZooDataset,
}

impl ZooSplits {
    /// No image digest is shared between any two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for d in [&self.defender, &self.attacker, &self.test] {
            let local: HashSet<_> = d.images.iter().map(|i| i.digest()).collect();
            if local.iter().any(|x| seen.contains(x)) {
                return Err(Error::InvalidConfig(format!("{} split overlaps another split", d.split.tag())));
            }
            seen.extend(local);
        }
        Ok(())
    }

    fn check_classes(&self) -> Result<()> {
        for d in [&self.defender, &self.attacker] {
            if d.class_counts().contains(&0) {
                return Err(Error::InvalidConfig(format!("{} split misses a class", d.split.tag())));
            }
        }
        Ok(())
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    weight: f64,
}

fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "templates"));
    let n = spec.size;
    (0..spec.classes)
        .map(|_| {
            let per_channel: Vec<Vec<Grating>> = (0..3)
                .map(|_| {
                    (0..spec.gratings)
                        .map(|_| Grating {
                            fx: rng.gen_range(0..=spec.max_frequency) as f64,
                            fy: rng.gen_range(0..=spec.max_frequency) as f64,
                            phase: rng.gen_range(0.0..2.0 * PI),
                            weight: rng.gen_range(0.5..1.0),
                        })
                        .collect()
                })
                .collect();
            let mut t = vec![0.0; n * n * 3];
            for y in 0..n {
                for x in 0..n {
                    for (c, gs) in per_channel.iter().enumerate() {
                        let norm: f64 = gs.iter().map(|g| g.weight).sum();
                        let v: f64 = gs
                            .iter()
                            .map(|g| {
                                let arg = 2.0 * PI * (g.fx * x as f64 + g.fy * y as f64) / n as f64 + g.phase;
                                g.weight * arg.sin()
                            })
                            .sum();
                        t[(y * n + x) * 3 + c] = v / norm;
                    }
                }
            }
            t
        })
        .collect()
}

fn synth_split(spec: &SyntheticSpec, templates: &[Vec<f64>], per_class: usize, split: Split) -> Result<ZooDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split.tag()));
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = spec.size;
    let mut order: Vec<usize> = (0..spec.classes).flat_map(|k| std::iter::repeat(k).take(per_class)).collect();
    order.shuffle(&mut rng);
    let mut images = Vec::with_capacity(order.len());
    for &k in &order {
        let other = (k + rng.gen_range(1..spec.classes)) % spec.classes;
        let blend = if rng.gen_bool(spec.ambiguous.clamp(0.0, 1.0)) {
            rng.gen_range(0.4..0.5)
        } else {
            rng.gen_range(0.0..=spec.max_blend)
        };
        let sx = rng.gen_range(0..=2 * spec.max_shift) + n - spec.max_shift;
        let sy = rng.gen_range(0..=2 * spec.max_shift) + n - spec.max_shift;
        let offset = rng.gen_range(-12.0..12.0);
        let mut px = vec![0u8; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let src = (((y + sy) % n) * n + (x + sx) % n) * 3;
                for c in 0..3 {
                    let t = (1.0 - blend) * templates[k][src + c] + blend * templates[other][src + c];
                    let v = 128.0 + offset + spec.amplitude * t + noise.sample(&mut rng);
                    px[(y * n + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        images.push(RawImage::new(n, n, 3, px)?);
    }
    Ok(ZooDataset {
        images,
        labels: order,
        classes: spec.classes,
        split,
        generator: Generator::Synthetic(spec.clone()),
    })
}

/// Defender, attacker and test splits. Each split draws from its own seeded
/// stream; disjointness is verified by content digest.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<ZooSplits> {
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
    }
    if spec.per_class < 2 || spec.test_per_class == 0 {
        return Err(Error::InvalidConfig("synthetic data needs at least 2 training and 1 test image per class".into()));
    }
    if spec.size < 8 || spec.max_shift >= spec.size {
        return Err(Error::InvalidConfig(format!("bad synthetic size {} / shift {}", spec.size, spec.max_shift)));
    }
    let templates = class_templates(spec);
    let half = spec.per_class / 2;
    let splits = ZooSplits {
        defender: synth_split(spec, &templates, half, Split::Defender)?,
        attacker: synth_split(spec, &templates, spec.per_class - half, Split::Attacker)?,
        test: synth_split(spec, &templates, spec.test_per_class, Split::Test)?,
    };
    splits.check_disjoint()?;
    splits.check_classes()?;
    Ok(splits)
}

pub const CIFAR_RECORD: usize = 3073;

/// Parse CIFAR-10 binary records (label byte + 1024 R, 1024 G, 1024 B).
pub fn read_cifar_records(data: &[u8]) -> Result<(Vec<RawImage>, Vec<usize>)> {
    if data.is_empty() || data.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            data.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in data.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Parse(format!("CIFAR label {label} out of range")));
        }
        let planes = &rec[1..];
        let mut px = vec![0u8; 3072];
        for i in 0..1024 {
            for c in 0..3 {
                px[i * 3 + c] = planes[c * 1024 + i];
            }
        }
        images.push(RawImage::new(32, 32, 3, px)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Load `data_batch_*.bin` as defender/attacker halves (seeded split) and
/// `test_batch.bin` as the test split.
pub fn load_cifar(dir: &Path, seed: u64) -> Result<ZooSplits> {
    let read = |name: &str| -> Result<(Vec<RawImage>, Vec<usize>)> {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        read_cifar_records(&bytes)
    };
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for b in 1..=5 {
        let name = format!("data_batch_{b}.bin");
        if !dir.join(&name).exists() {
            continue;
        }
        let (i, l) = read(&name)?;
        train_images.extend(i);
        train_labels.extend(l);
    }
    if train_images.is_empty() {
        return Err(Error::InvalidConfig(format!("no data_batch_*.bin under {}", dir.display())));
    }
    let (test_images, test_labels) = read("test_batch.bin")?;
    let generator = Generator::CifarBinary { path: dir.to_path_buf() };
    let mut idx: Vec<usize> = (0..train_images.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "cifar-split")));
    let half = idx.len() / 2;
    let take = |ids: &[usize], split| ZooDataset {
        images: ids.iter().map(|&i| train_images[i].clone()).collect(),
        labels: ids.iter().map(|&i| train_labels[i]).collect(),
        classes: 10,
        split,
        generator: generator.clone(),
    };
    let splits = ZooSplits {
        defender: take(&idx[..half], Split::Defender),
        attacker: take(&idx[half..], Split::Attacker),
        test: ZooDataset {
            images: test_images,
            labels: test_labels,
            classes: 10,
            split: Split::Test,
            generator: generator.clone(),
        },
    };
    splits.check_classes()?;
    Ok(splits)
}

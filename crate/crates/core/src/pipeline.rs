//! End-to-end audit: probes, outputs, fingerprints, verdicts and metrics.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_matrix, fingerprint_distance, CorrelationMatrix, KernelSpec, OutputKind, OutputMatrix};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Label, ScoredPool};
use crate::probekit::{
    build_probe_set_with, load_image_dir, load_probe_set, Corruption, ProbeSet, DEFAULT_PROBE_COUNT, DEFAULT_QUALITY,
};
use crate::verdict::{threshold_validation_mean, threshold_worst_irrelevant, AuditReport, ThresholdStrategy};
use crate::zoo::{gen_synthetic, Lineage, SyntheticSpec, ZooModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_STOLEN: i32 = 2;

/// Where audit probes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeSource {
    /// Image files in a directory.
    Dir { path: PathBuf },
    /// Test split of the synthetic generator.
    Synthetic(SyntheticSpec),
    /// A saved probe set; count and quality come from its manifest.
    ProbeSet { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_quality")]
    pub quality: u8,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default = "default_strategy")]
    pub threshold_strategy: ThresholdStrategy,
    #[serde(default = "default_output_kind")]
    pub output_kind: OutputKind,
    pub probes: ProbeSource,
    pub source: PathBuf,
    #[serde(default)]
    pub suspects: Vec<PathBuf>,
    pub irrelevant: Vec<PathBuf>,
    #[serde(default)]
    pub adv_extraction: Vec<PathBuf>,
}

fn default_quality() -> u8 {
    DEFAULT_QUALITY
}

fn default_probe_count() -> usize {
    DEFAULT_PROBE_COUNT
}

fn default_kernel() -> KernelSpec {
    KernelSpec::Cosine
}

fn default_strategy() -> ThresholdStrategy {
    ThresholdStrategy::WorstIrrelevant
}

fn default_output_kind() -> OutputKind {
    OutputKind::Probability
}

impl AuditConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("audit config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        Corruption::jpeg(self.quality)?;
        if self.probe_count < 2 {
            return Err(Error::InvalidConfig("probe_count must be at least 2".into()));
        }
        if self.output_kind == OutputKind::Bitvector {
            return Err(Error::InvalidConfig("classifier outputs cannot be bitvectors".into()));
        }
        if self.threshold_strategy == ThresholdStrategy::ValidationMean && self.adv_extraction.is_empty() {
            return Err(Error::InvalidConfig("validation-mean needs adv_extraction models".into()));
        }
        Ok(())
    }

    /// Rewrite every relative path against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = base.join(&*p);
        match &mut self.probes {
            ProbeSource::Dir { path } | ProbeSource::ProbeSet { path } => fix(path),
            ProbeSource::Synthetic(_) => {}
        }
        fix(&mut self.source);
        self.suspects.iter_mut().for_each(fix);
        self.irrelevant.iter_mut().for_each(fix);
        self.adv_extraction.iter_mut().for_each(fix);
    }
}

pub fn resolve_probes(source: &ProbeSource, count: usize, corruption: Corruption, seed: u64) -> Result<ProbeSet> {
    match source {
        ProbeSource::Dir { path } => build_probe_set_with(&load_image_dir(path)?, count, corruption, seed),
        ProbeSource::Synthetic(spec) => build_probe_set_with(&gen_synthetic(spec)?.test.images, count, corruption, seed),
        ProbeSource::ProbeSet { path } => load_probe_set(path),
    }
}

/// Query a saved model on a saved probe set.
pub fn model_outputs(model: &Path, probes: &Path, kind: OutputKind) -> Result<OutputMatrix> {
    let model = ZooModel::load(model)?;
    let set = load_probe_set(probes)?;
    model.outputs(&set, kind)
}

/// Write a model's probability outputs on `probes` to `out`.
pub fn run_outputs(model: &Path, probes: &Path, out: &Path) -> Result<OutputMatrix> {
    let m = model_outputs(model, probes, OutputKind::Probability)?;
    m.save(out)?;
    Ok(m)
}

/// Outputs must have been computed on exactly these probes.
pub fn check_outputs(outputs: &OutputMatrix, probes: &ProbeSet) -> Result<()> {
    if outputs.probe_digest() != probes.digest() {
        return Err(Error::ProbeSetMismatch(format!(
            "outputs were computed on probes {}, expected {}",
            outputs.probe_digest().short(),
            probes.digest().short()
        )));
    }
    Ok(())
}

pub fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

struct Fingerprinted {
    name: String,
    lineage: Lineage,
    fp: CorrelationMatrix,
}

fn fingerprint_all(paths: &[PathBuf], probes: &ProbeSet, kind: OutputKind, kernel: KernelSpec) -> Result<Vec<Fingerprinted>> {
    paths
        .par_iter()
        .map(|p| {
            let model = ZooModel::load(p)?;
            let outputs = model.outputs(probes, kind)?;
            Ok(Fingerprinted {
                name: model_name(p),
                lineage: model.lineage,
                fp: correlation_matrix(&outputs, kernel)?,
            })
        })
        .collect()
}

/// Label implied by a model's recorded lineage. A copy of the source counts
/// as stolen.
pub fn lineage_label(lineage: &Lineage) -> Label {
    match lineage {
        Lineage::Irrelevant { .. } => Label::Irrelevant,
        _ => Label::Stolen,
    }
}

/// Fingerprint the source and every suspect, set the threshold from the
/// calibration pools and decide each suspect. Metrics are attached only when
/// the suspects' lineages cover both labels.
pub fn run_pipeline(config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let probes = resolve_probes(&config.probes, config.probe_count, Corruption::jpeg(config.quality)?, config.seed)?;
    log::info!("audit on {} probes ({})", probes.len(), probes.digest().short());
    let source = ZooModel::load(&config.source)?;
    let source_out = source.outputs(&probes, config.output_kind)?;
    let kernel = config.kernel.resolve(&source_out)?;
    let source_fp = correlation_matrix(&source_out, kernel.into())?;

    let distances = |set: &[Fingerprinted]| -> Result<Vec<f64>> {
        set.iter()
            .map(|f| Ok(fingerprint_distance(&source_fp, &f.fp)?.value))
            .collect()
    };
    let irrelevant = fingerprint_all(&config.irrelevant, &probes, config.output_kind, kernel.into())?;
    let irr_d = distances(&irrelevant)?;
    let threshold = match config.threshold_strategy {
        ThresholdStrategy::WorstIrrelevant => threshold_worst_irrelevant(&irr_d)?,
        ThresholdStrategy::ValidationMean => {
            let adv = fingerprint_all(&config.adv_extraction, &probes, config.output_kind, kernel.into())?;
            let mut t = threshold_validation_mean(&irr_d, &distances(&adv)?)?;
            t.pool.extend(adv.iter().map(|f| f.fp.digest()));
            t
        }
    };
    let mut pool: Vec<_> = irrelevant.iter().map(|f| f.fp.digest()).collect();
    pool.extend(threshold.pool.iter().copied());
    let threshold = threshold.with_pool(pool);

    let suspects = fingerprint_all(&config.suspects, &probes, config.output_kind, kernel.into())?;
    let mut scored = Vec::with_capacity(suspects.len());
    for s in &suspects {
        scored.push((s.name.clone(), fingerprint_distance(&source_fp, &s.fp)?));
    }
    let mut report = AuditReport::build(probes.digest(), kernel, threshold, scored.iter().cloned());

    let mut pool = ScoredPool::default();
    for (s, (_, d)) in suspects.iter().zip(&scored) {
        pool.push(s.name.clone(), d.value, lineage_label(&s.lineage));
    }
    if !pool.scores(Label::Stolen).is_empty() && !pool.scores(Label::Irrelevant).is_empty() {
        report.metrics = Some(evaluate(&pool, Some(report.threshold.value))?);
    }
    Ok(report)
}

pub fn exit_code(report: &AuditReport) -> i32 {
    if report.any_stolen() {
        EXIT_STOLEN
    } else {
        EXIT_OK
    }
}

/// Echo file for an output: `sac-run.json` inside a directory output,
/// `<file>.run.json` next to a file output.
pub fn echo_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("sac-run.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

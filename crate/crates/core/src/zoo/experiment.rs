//! End-to-end zoo experiments: train a source model, derive every attack
//! family plus independent models, fingerprint them all on the same probes
//! and report per-family detection quality.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{gen_synthetic, load_cifar, Split, SyntheticSpec, ZooSplits};
use super::net::{Arch, Scope};
use super::train::TrainConfig;
use super::verifier::{verifier_from, EmbeddingVerifier};
use super::{attacks, derive_seed, ExtractMode, Lineage, ZooModel};
use crate::correlation::{
    correlation_matrix, fingerprint_distance, label_disagreement, CorrelationMatrix, Kernel, KernelSpec, OutputKind,
};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::fri::{fri_fingerprint, save_groups, IdentityGroup};
use crate::metrics::{auc_roc, f1_at_threshold, t_test_p, Label, ScoredPool};
use crate::probekit::{build_probe_set_with, save_probe_set, Corruption, ProbeSet};
use crate::verdict::{decide, threshold_worst_irrelevant, Decision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Mlp,
    Conv,
}

/// `"mlp"`, `"conv"` or a full architecture object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Named(ArchName),
    Custom(Arch),
}

impl ArchSpec {
    pub fn build(&self, classes: usize) -> Arch {
        match self {
            ArchSpec::Named(ArchName::Mlp) => Arch::mlp(classes),
            ArchSpec::Named(ArchName::Conv) => Arch::conv(classes),
            ArchSpec::Custom(a) => Arch {
                classes,
                ..a.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrrelevantConfig {
    pub archs: Vec<ArchSpec>,
    pub per_arch: usize,
    /// Training split (the test split is rejected).
    pub data: Split,
}

impl Default for IrrelevantConfig {
    fn default() -> Self {
        IrrelevantConfig {
            archs: vec![ArchSpec::Named(ArchName::Mlp), ArchSpec::Named(ArchName::Conv)],
            per_arch: 5,
            data: Split::Attacker,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            count: 5,
            epochs: 3,
            learning_rate: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub fractions: Vec<f64>,
    pub per_fraction: usize,
    /// Defender images used to rank units.
    pub holdout: usize,
    /// Fine-tuning epochs on attacker data after pruning.
    pub finetune_epochs: usize,
    pub learning_rate: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            fractions: vec![0.1, 0.2, 0.25],
            per_fraction: 2,
            holdout: 500,
            finetune_epochs: 2,
            learning_rate: 0.01,
        }
    }
}

/// Shared by the extraction and distillation families; `alpha`/`temperature`
/// apply to probability extraction and distillation, the `adv_` fields and
/// `epsilon` to the evasion phase of adversarial extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Student architectures, cycled over the models of the family.
    pub students: Vec<ArchSpec>,
    pub alpha: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub adv_epochs: usize,
    pub adv_learning_rate: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            count: 5,
            epochs: 10,
            learning_rate: 0.02,
            students: vec![ArchSpec::Named(ArchName::Mlp)],
            alpha: 0.9,
            temperature: 20.0,
            epsilon: 8.0 / 255.0,
            adv_epochs: 2,
            adv_learning_rate: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainConfig {
    pub count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            count: 5,
            epochs: 2,
            learning_rate: 0.01,
            epsilon: 8.0 / 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// New label space: class `k` becomes `k mod classes`.
    pub classes: usize,
    pub scope: Scope,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            count: 5,
            epochs: 3,
            learning_rate: 0.01,
            classes: 5,
            scope: Scope::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttacksConfig {
    pub finetune_all: FinetuneConfig,
    pub finetune_last: FinetuneConfig,
    pub prune: PruneConfig,
    pub extract_label: ExtractConfig,
    pub extract_prob: ExtractConfig,
    pub extract_adv: ExtractConfig,
    pub adv_train: AdvTrainConfig,
    pub transfer: TransferConfig,
    pub distill: ExtractConfig,
}

impl Default for AttacksConfig {
    fn default() -> Self {
        AttacksConfig {
            finetune_all: FinetuneConfig::default(),
            finetune_last: FinetuneConfig {
                learning_rate: 0.02,
                ..FinetuneConfig::default()
            },
            prune: PruneConfig::default(),
            extract_label: ExtractConfig::default(),
            extract_prob: ExtractConfig::default(),
            extract_adv: ExtractConfig::default(),
            adv_train: AdvTrainConfig::default(),
            transfer: TransferConfig::default(),
            distill: ExtractConfig {
                count: 0,
                ..ExtractConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub count: usize,
    /// Second, smaller probe set (a prefix of the main one).
    pub small_count: usize,
    pub quality: u8,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            count: crate::probekit::DEFAULT_PROBE_COUNT,
            small_count: 25,
            quality: crate::probekit::DEFAULT_QUALITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FriConfig {
    pub trials: usize,
    pub targets: usize,
    pub references: usize,
    pub calibration_pairs: usize,
    /// Family whose first model plays the source-derived verifier.
    pub derived: Family,
}

impl Default for FriConfig {
    fn default() -> Self {
        FriConfig {
            trials: 10,
            targets: crate::fri::DEFAULT_TARGETS,
            references: crate::fri::DEFAULT_REFERENCES,
            calibration_pairs: 400,
            derived: Family::FinetuneAll,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub source: ArchSpec,
    /// Training schedule of the source and the irrelevant models (its seed is
    /// replaced by per-model derived seeds).
    pub train: TrainConfig,
    pub irrelevant: IrrelevantConfig,
    pub attacks: AttacksConfig,
    pub probes: ProbeConfig,
    pub output_kind: OutputKind,
    pub kernel: KernelSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fri: Option<FriConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::Synthetic(SyntheticSpec::default()),
            source: ArchSpec::Named(ArchName::Mlp),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            irrelevant: IrrelevantConfig::default(),
            attacks: AttacksConfig::default(),
            probes: ProbeConfig::default(),
            output_kind: OutputKind::Logit,
            kernel: KernelSpec::Cosine,
            fri: Some(FriConfig::default()),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.irrelevant.archs.is_empty() || self.irrelevant.per_arch == 0 {
            return Err(Error::InvalidConfig("at least one irrelevant model is required".into()));
        }
        if self.irrelevant.data == Split::Test {
            return Err(Error::InvalidConfig("irrelevant models cannot train on the test split".into()));
        }
        let p = &self.probes;
        if p.count < 2 || p.small_count < 2 || p.small_count > p.count {
            return Err(Error::InvalidConfig(format!(
                "probe counts {} / {} are unusable",
                p.count, p.small_count
            )));
        }
        crate::probekit::jpeg::check_quality(p.quality)?;
        if self.output_kind == OutputKind::Bitvector {
            return Err(Error::InvalidConfig("classifier outputs cannot be bitvectors".into()));
        }
        for (name, e) in [
            ("extract_label", &self.attacks.extract_label),
            ("extract_prob", &self.attacks.extract_prob),
            ("extract_adv", &self.attacks.extract_adv),
            ("distill", &self.attacks.distill),
        ] {
            if e.count > 0 && e.students.is_empty() {
                return Err(Error::InvalidConfig(format!("{name}: no student architectures")));
            }
        }
        if let Some(f) = self.attacks.prune.fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::InvalidFraction(*f));
        }
        if self.attacks.transfer.count > 0 && self.attacks.transfer.classes < 2 {
            return Err(Error::InvalidConfig("transfer needs at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Irrelevant,
    FinetuneAll,
    FinetuneLast,
    Prune,
    ExtractLabel,
    ExtractProb,
    ExtractAdv,
    AdvTrain,
    Transfer,
    Distill,
}

impl Family {
    pub const STOLEN: [Family; 9] = [
        Family::FinetuneAll,
        Family::FinetuneLast,
        Family::Prune,
        Family::ExtractLabel,
        Family::ExtractProb,
        Family::ExtractAdv,
        Family::AdvTrain,
        Family::Transfer,
        Family::Distill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Irrelevant => "irrelevant",
            Family::FinetuneAll => "finetune_all",
            Family::FinetuneLast => "finetune_last",
            Family::Prune => "prune",
            Family::ExtractLabel => "extract_label",
            Family::ExtractProb => "extract_prob",
            Family::ExtractAdv => "extract_adv",
            Family::AdvTrain => "adv_train",
            Family::Transfer => "transfer",
            Family::Distill => "distill",
        }
    }

    pub fn is_extraction(self) -> bool {
        matches!(self, Family::ExtractLabel | Family::ExtractProb | Family::ExtractAdv)
    }

    pub fn label(self) -> Label {
        if self == Family::Irrelevant {
            Label::Irrelevant
        } else {
            Label::Stolen
        }
    }
}

#[derive(Clone, Debug)]
pub struct ZooMember {
    pub name: String,
    pub family: Family,
    pub model: ZooModel,
}

pub struct Zoo {
    pub config: ExperimentConfig,
    pub splits: ZooSplits,
    pub source: ZooModel,
    pub members: Vec<ZooMember>,
}

impl Zoo {
    pub fn family(&self, f: Family) -> impl Iterator<Item = &ZooMember> {
        self.members.iter().filter(move |m| m.family == f)
    }
}

enum Job {
    Irrelevant(Arch, Split),
    Finetune(Scope, FinetuneConfig),
    Prune(f64, PruneConfig),
    Extract(ExtractMode, Arch, ExtractConfig),
    AdvTrain(AdvTrainConfig),
    Transfer(TransferConfig),
    Distill(Arch, ExtractConfig),
}

fn schedule(config: &ExperimentConfig, classes: usize) -> Vec<(String, Family, Job)> {
    let mut jobs = Vec::new();
    for (a, spec) in config.irrelevant.archs.iter().enumerate() {
        let arch = spec.build(classes);
        for i in 0..config.irrelevant.per_arch {
            let name = format!("irrelevant_{}{a}_{i}", arch.family());
            jobs.push((name, Family::Irrelevant, Job::Irrelevant(arch.clone(), config.irrelevant.data)));
        }
    }
    let at = &config.attacks;
    for i in 0..at.finetune_all.count {
        jobs.push((format!("finetune_all_{i}"), Family::FinetuneAll, Job::Finetune(Scope::All, at.finetune_all.clone())));
    }
    for i in 0..at.finetune_last.count {
        jobs.push((format!("finetune_last_{i}"), Family::FinetuneLast, Job::Finetune(Scope::Last, at.finetune_last.clone())));
    }
    for &p in &at.prune.fractions {
        for i in 0..at.prune.per_fraction {
            let name = format!("prune_p{:03}_{i}", (p * 100.0).round() as u32);
            jobs.push((name, Family::Prune, Job::Prune(p, at.prune.clone())));
        }
    }
    let extraction = [
        (Family::ExtractLabel, &at.extract_label),
        (Family::ExtractProb, &at.extract_prob),
        (Family::ExtractAdv, &at.extract_adv),
    ];
    for (family, e) in extraction {
        let mode = match family {
            Family::ExtractLabel => ExtractMode::Label,
            Family::ExtractProb => ExtractMode::Prob {
                alpha: e.alpha,
                temperature: e.temperature,
            },
            _ => ExtractMode::Adv {
                epsilon: e.epsilon,
                epochs: e.adv_epochs,
                learning_rate: e.adv_learning_rate,
            },
        };
        for i in 0..e.count {
            let arch = e.students[i % e.students.len()].build(classes);
            let name = format!("{}_{}_{i}", family.name(), arch.family());
            jobs.push((name, family, Job::Extract(mode, arch, e.clone())));
        }
    }
    for i in 0..at.adv_train.count {
        jobs.push((format!("adv_train_{i}"), Family::AdvTrain, Job::AdvTrain(at.adv_train.clone())));
    }
    for i in 0..at.transfer.count {
        jobs.push((format!("transfer_{i}"), Family::Transfer, Job::Transfer(at.transfer.clone())));
    }
    for i in 0..at.distill.count {
        let arch = at.distill.students[i % at.distill.students.len()].build(classes);
        let name = format!("distill_{}_{i}", arch.family());
        jobs.push((name, Family::Distill, Job::Distill(arch, at.distill.clone())));
    }
    jobs
}

fn run_job(job: &Job, seed: u64, source: &ZooModel, splits: &ZooSplits, base: &TrainConfig) -> Result<ZooModel> {
    let cfg = |epochs: usize, lr: f64| TrainConfig {
        epochs,
        learning_rate: lr,
        seed,
        ..base.clone()
    };
    let attacker = &splits.attacker;
    match job {
        Job::Irrelevant(arch, split) => {
            let data = if *split == Split::Defender { &splits.defender } else { attacker };
            attacks::train(data, arch.clone(), Lineage::Irrelevant { seed }, &base.with_seed(seed))
        }
        Job::Finetune(scope, c) => attacks::finetune(source, attacker, *scope, &cfg(c.epochs, c.learning_rate)),
        Job::Prune(p, c) => {
            let n = c.holdout.min(splits.defender.len());
            let pruned = attacks::prune(source, &splits.defender.images[..n], *p)?;
            let mut tuned = attacks::finetune(&pruned, attacker, Scope::All, &cfg(c.finetune_epochs, c.learning_rate))?;
            tuned.lineage = Lineage::Pruned { p: *p };
            Ok(tuned)
        }
        Job::Extract(mode, arch, c) => {
            attacks::extract(source, &attacker.images, *mode, arch.clone(), &cfg(c.epochs, c.learning_rate))
        }
        Job::AdvTrain(c) => attacks::adv_train(source, attacker, c.epsilon, &cfg(c.epochs, c.learning_rate)),
        Job::Transfer(c) => {
            let map: Vec<usize> = (0..attacker.classes).map(|k| k % c.classes).collect();
            attacks::transfer(source, attacker, &map, c.scope, &cfg(c.epochs, c.learning_rate))
        }
        Job::Distill(arch, c) => attacks::distill(
            source,
            arch.clone(),
            &splits.defender,
            c.alpha,
            c.temperature,
            &cfg(c.epochs, c.learning_rate),
        ),
    }
}

pub fn load_splits(config: &ExperimentConfig) -> Result<ZooSplits> {
    match &config.dataset {
        DatasetConfig::Synthetic(spec) => gen_synthetic(spec),
        DatasetConfig::Cifar { path } => load_cifar(path, config.seed),
    }
}

/// Train the source model and every configured suspect.
pub fn build_zoo(config: &ExperimentConfig) -> Result<Zoo> {
    config.validate()?;
    let splits = load_splits(config)?;
    let classes = splits.defender.classes;
    let source = attacks::train(
        &splits.defender,
        config.source.build(classes),
        Lineage::Source,
        &config.train.with_seed(derive_seed(config.seed, "source")),
    )?;
    log::info!("source trained, test accuracy {:.3}", source.accuracy(&splits.test)?);
    let jobs = schedule(config, classes);
    let members = jobs
        .par_iter()
        .map(|(name, family, job)| {
            let seed = derive_seed(config.seed, name);
            let model = run_job(job, seed, &source, &splits, &config.train)?;
            log::info!("trained {name}");
            Ok(ZooMember {
                name: name.clone(),
                family: *family,
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Zoo {
        config: config.clone(),
        splits,
        source,
        members,
    })
}

/// JPEG probes, their prefix, and the same images uncompressed.
pub struct ProbeSuite {
    pub jc: ProbeSet,
    pub small: ProbeSet,
    pub clean: ProbeSet,
}

impl ProbeSuite {
    pub fn build(zoo: &Zoo) -> Result<Self> {
        let p = &zoo.config.probes;
        let seed = derive_seed(zoo.config.seed, "probes");
        let images = &zoo.splits.test.images;
        let jc = build_probe_set_with(images, p.count, Corruption::jpeg(p.quality)?, seed)?;
        let small = jc.prefix(p.small_count)?;
        let clean = build_probe_set_with(images, p.count, Corruption::None, seed)?;
        Ok(ProbeSuite { jc, small, clean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub name: String,
    pub family: Family,
    pub label: Label,
    pub accuracy: f64,
    /// Cosine (or configured kernel) distance on the JPEG probes.
    pub jc: f64,
    pub jc_small: f64,
    pub clean: f64,
    /// Gaussian-kernel distance on the JPEG probes (source-median bandwidth).
    pub rbf: f64,
    /// Fraction of JPEG probes where the argmax label differs from the
    /// source; absent when the label spaces differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disagreement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub family: String,
    pub models: usize,
    pub auc_jc: f64,
    pub auc_jc_small: f64,
    pub auc_clean: f64,
    pub auc_rbf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub f1: f64,
    pub detected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriTrial {
    pub seed: u64,
    pub derived: f64,
    pub independent: Vec<f64>,
    pub copy: f64,
    pub copy_decision: Decision,
    pub threshold: f64,
}

impl FriTrial {
    pub fn derived_is_closest(&self) -> bool {
        self.independent.iter().all(|&d| self.derived < d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriReport {
    pub derived_model: String,
    pub independent_models: Vec<String>,
    pub tau_source: f64,
    pub trials: Vec<FriTrial>,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooReport {
    pub seed: u64,
    pub config_digest: Digest,
    pub source_accuracy: f64,
    pub probe_digest: Digest,
    pub small_probe_digest: Digest,
    pub clean_probe_digest: Digest,
    pub kernel: Kernel,
    pub threshold: f64,
    pub members: Vec<MemberScore>,
    pub pools: Vec<PoolReport>,
    /// All extraction families scored as one pool.
    pub extraction: Option<PoolReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fri: Option<FriReport>,
}

impl ZooReport {
    pub fn pool(&self, family: Family) -> Option<&PoolReport> {
        self.pools.iter().find(|p| p.family == family.name())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self).expect("report serializes")).map_err(|e| Error::io(path, e))
    }
}

struct Fingerprints {
    jc: CorrelationMatrix,
    small: CorrelationMatrix,
    clean: CorrelationMatrix,
    rbf: CorrelationMatrix,
}

fn fingerprints(model: &ZooModel, suite: &ProbeSuite, config: &ExperimentConfig, bandwidth: Option<f64>) -> Result<Fingerprints> {
    let kind = config.output_kind;
    let jc_out = model.outputs(&suite.jc, kind)?;
    Ok(Fingerprints {
        jc: correlation_matrix(&jc_out, config.kernel)?,
        small: correlation_matrix(&model.outputs(&suite.small, kind)?, config.kernel)?,
        clean: correlation_matrix(&model.outputs(&suite.clean, kind)?, config.kernel)?,
        rbf: correlation_matrix(&jc_out, KernelSpec::Rbf { bandwidth })?,
    })
}

fn pool_of(scores: &[&MemberScore], pick: impl Fn(&MemberScore) -> Option<f64>) -> Option<ScoredPool> {
    let mut pool = ScoredPool::default();
    for s in scores {
        pool.push(s.name.clone(), pick(s)?, s.label);
    }
    Some(pool)
}

fn pool_report(name: &str, stolen: &[&MemberScore], irrelevant: &[&MemberScore], threshold: f64) -> Result<PoolReport> {
    let all: Vec<&MemberScore> = stolen.iter().chain(irrelevant).copied().collect();
    let auc = |pick: &dyn Fn(&MemberScore) -> Option<f64>| pool_of(&all, pick).map(|p| auc_roc(&p)).transpose();
    let jc_pool = pool_of(&all, |s| Some(s.jc)).expect("always present");
    let (f1, counts) = f1_at_threshold(&jc_pool, threshold);
    Ok(PoolReport {
        family: name.to_string(),
        models: stolen.len(),
        auc_jc: auc_roc(&jc_pool)?,
        auc_jc_small: auc(&|s| Some(s.jc_small))?.expect("present"),
        auc_clean: auc(&|s| Some(s.clean))?.expect("present"),
        auc_rbf: auc(&|s| Some(s.rbf))?.expect("present"),
        auc_baseline: auc(&|s| s.disagreement)?,
        p_value: t_test_p(&jc_pool).ok(),
        f1,
        detected: counts.tp,
    })
}

/// Fingerprint every member against the source on all probe variants.
pub fn score_zoo(zoo: &Zoo, suite: &ProbeSuite) -> Result<ZooReport> {
    let config = &zoo.config;
    let source_jc = zoo.source.outputs(&suite.jc, config.output_kind)?;
    let bandwidth = KernelSpec::Rbf { bandwidth: None }.resolve(&source_jc)?;
    let bw = match bandwidth {
        Kernel::Rbf { bandwidth } => Some(bandwidth),
        Kernel::Cosine => None,
    };
    let src = fingerprints(&zoo.source, suite, config, bw)?;
    let members = zoo
        .members
        .par_iter()
        .map(|m| {
            let fp = fingerprints(&m.model, suite, config, bw)?;
            let dist = |a: &CorrelationMatrix, b: &CorrelationMatrix| fingerprint_distance(a, b).map(|d| d.value);
            let disagreement = if m.model.arch.classes == zoo.source.arch.classes {
                Some(label_disagreement(&source_jc, &m.model.outputs(&suite.jc, config.output_kind)?)?)
            } else {
                None
            };
            Ok(MemberScore {
                name: m.name.clone(),
                family: m.family,
                label: m.family.label(),
                accuracy: match m.model.arch.classes == zoo.splits.test.classes {
                    true => m.model.accuracy(&zoo.splits.test)?,
                    false => {
                        let map: Vec<usize> = (0..zoo.splits.test.classes).map(|k| k % m.model.arch.classes).collect();
                        m.model.accuracy(&zoo.splits.test.relabel(&map)?)?
                    }
                },
                jc: dist(&src.jc, &fp.jc)?,
                jc_small: dist(&src.small, &fp.small)?,
                clean: dist(&src.clean, &fp.clean)?,
                rbf: dist(&src.rbf, &fp.rbf)?,
                disagreement,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let irrelevant: Vec<&MemberScore> = members.iter().filter(|m| m.family == Family::Irrelevant).collect();
    let irr_jc: Vec<f64> = irrelevant.iter().map(|m| m.jc).collect();
    let threshold = threshold_worst_irrelevant(&irr_jc)?.value;
    let mut pools = Vec::new();
    for family in Family::STOLEN {
        let stolen: Vec<&MemberScore> = members.iter().filter(|m| m.family == family).collect();
        if !stolen.is_empty() {
            pools.push(pool_report(family.name(), &stolen, &irrelevant, threshold)?);
        }
    }
    let extracted: Vec<&MemberScore> = members.iter().filter(|m| m.family.is_extraction()).collect();
    let extraction = if extracted.is_empty() {
        None
    } else {
        Some(pool_report("extraction", &extracted, &irrelevant, threshold)?)
    };
    Ok(ZooReport {
        seed: config.seed,
        config_digest: config.digest(),
        source_accuracy: zoo.source.accuracy(&zoo.splits.test)?,
        probe_digest: suite.jc.digest(),
        small_probe_digest: suite.small.digest(),
        clean_probe_digest: suite.clean.digest(),
        kernel: src.jc.kernel(),
        threshold,
        members,
        pools,
        extraction,
        fri: None,
    })
}

/// Identity groups where the identity is the class label: each target gets
/// `references` other test images of its class.
pub fn class_groups(zoo: &Zoo, targets: usize, references: usize, seed: u64) -> Result<Vec<IdentityGroup>> {
    let test = &zoo.splits.test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..targets)
        .map(|m| {
            let k = m % test.classes;
            let mut pool = test.indices_of(k);
            if pool.len() <= references {
                return Err(Error::InsufficientImages {
                    requested: references + 1,
                    available: pool.len(),
                });
            }
            let (picked, _) = pool.partial_shuffle(&mut rng, references + 1);
            let target = test.images[picked[0]].clone();
            let refs = picked[1..].iter().map(|&i| test.images[i].clone()).collect();
            IdentityGroup::new(format!("class{k}_{m}"), target, refs)
        })
        .collect()
}

/// Verifier round trips: the source against a source-derived verifier, every
/// independently trained verifier and an exact copy, over seeded group draws.
fn fri_seed(seed: u64) -> u64 {
    derive_seed(seed, "fri")
}

fn trial_seed(fri_seed: u64, trial: usize) -> u64 {
    derive_seed(fri_seed, &format!("trial{trial}"))
}

pub fn run_fri(zoo: &Zoo, config: &FriConfig) -> Result<FriReport> {
    let seed = fri_seed(zoo.config.seed);
    let calib = &zoo.splits.attacker;
    let pairs = config.calibration_pairs;
    let make = |m: &ZooModel, tag: &str| -> Result<EmbeddingVerifier> {
        let v = verifier_from(m, calib, pairs, derive_seed(seed, tag))?;
        v.warm(&zoo.splits.test.images)?;
        Ok(v)
    };
    let source_v = make(&zoo.source, "source")?;
    let derived = zoo
        .family(config.derived)
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("no {} model for the FRI check", config.derived.name())))?;
    let derived_v = make(&derived.model, &derived.name)?;
    let independent: Vec<&ZooMember> = zoo.family(Family::Irrelevant).collect();
    let independent_v = independent
        .iter()
        .map(|m| make(&m.model, &m.name))
        .collect::<Result<Vec<_>>>()?;
    let copy_v = EmbeddingVerifier::new(zoo.source.clone(), source_v.tau())?;
    copy_v.warm(&zoo.splits.test.images)?;
    let q = zoo.config.probes.quality;
    let mut trials = Vec::with_capacity(config.trials);
    for t in 0..config.trials {
        let tseed = trial_seed(seed, t);
        let groups = class_groups(zoo, config.targets, config.references, tseed)?;
        let src = fri_fingerprint(&groups, &source_v, q)?;
        let dist = |v: &EmbeddingVerifier| -> Result<f64> {
            Ok(fingerprint_distance(&src, &fri_fingerprint(&groups, v, q)?)?.value)
        };
        let independent_d = independent_v.iter().map(&dist).collect::<Result<Vec<_>>>()?;
        let copy_fd = fingerprint_distance(&src, &fri_fingerprint(&groups, &copy_v, q)?)?;
        let threshold = threshold_worst_irrelevant(&independent_d)?;
        trials.push(FriTrial {
            seed: tseed,
            derived: dist(&derived_v)?,
            copy: copy_fd.value,
            copy_decision: decide(&copy_fd, &threshold).decision,
            threshold: threshold.value,
            independent: independent_d,
        });
    }
    let wins = trials.iter().filter(|t| t.derived_is_closest()).count();
    Ok(FriReport {
        derived_model: derived.name.clone(),
        independent_models: independent.iter().map(|m| m.name.clone()).collect(),
        tau_source: source_v.tau(),
        success_rate: wins as f64 / trials.len().max(1) as f64,
        trials,
    })
}

/// Build, score and (optionally) run the verifier round trips.
pub fn run(config: &ExperimentConfig) -> Result<(Zoo, ProbeSuite, ZooReport)> {
    let zoo = build_zoo(config)?;
    let suite = ProbeSuite::build(&zoo)?;
    let mut report = score_zoo(&zoo, &suite)?;
    if let Some(fri) = &config.fri {
        report.fri = Some(run_fri(&zoo, fri)?);
    }
    Ok((zoo, suite, report))
}

/// Write models, probe sets, outputs, fingerprints, score tables, the report
/// and the resolved config under `out`.
pub fn write_artifacts(zoo: &Zoo, suite: &ProbeSuite, report: &ZooReport, out: &Path) -> Result<()> {
    for sub in ["models", "outputs", "fingerprints"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, zoo.config.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    save_probe_set(&suite.jc, out.join("probes"))?;
    save_probe_set(&suite.clean, out.join("probes_clean"))?;
    let kind = zoo.config.output_kind;
    let models = std::iter::once(("source", &zoo.source)).chain(zoo.members.iter().map(|m| (m.name.as_str(), &m.model)));
    for (name, model) in models {
        model.save(out.join("models").join(format!("{name}.sacm")))?;
        let o = model.outputs(&suite.jc, kind)?;
        o.save(out.join("outputs").join(format!("{name}.saco")))?;
        correlation_matrix(&o, zoo.config.kernel)?.save(out.join("fingerprints").join(format!("{name}.sacc")))?;
    }
    let table = |pick: fn(&MemberScore) -> f64| {
        let mut pool = ScoredPool::default();
        for m in &report.members {
            pool.push(m.name.clone(), pick(m), m.label);
        }
        pool
    };
    table(|m| m.jc).write_csv(out.join("scores.csv"))?;
    table(|m| m.jc_small).write_csv(out.join("scores_small.csv"))?;
    table(|m| m.clean).write_csv(out.join("scores_clean.csv"))?;
    table(|m| m.rbf).write_csv(out.join("scores_rbf.csv"))?;
    if let Some(fri) = &zoo.config.fri {
        // the first trial's groups, so `sac fri` can redo it from the saved models
        let groups = class_groups(zoo, fri.targets, fri.references, trial_seed(fri_seed(zoo.config.seed), 0))?;
        save_groups(&groups, out.join("fri_groups"))?;
    }
    report.save(out.join("report.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_roundtrip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(c.to_json().as_bytes()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(ExperimentConfig::from_json(br#"{"sede": 3}"#).is_err());
        let c = ExperimentConfig::from_json(br#"{"seed": 3, "source": "conv"}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.source, ArchSpec::Named(ArchName::Conv));
        assert!(ExperimentConfig::from_json(br#"{"dataset": {"kind": "synthetic", "noize": 1}}"#).is_err());
    }

    #[test]
    fn schedule_covers_families() {
        let jobs = schedule(&ExperimentConfig::default(), 10);
        let count = |f: Family| jobs.iter().filter(|j| j.1 == f).count();
        assert_eq!(count(Family::Irrelevant), 10);
        assert_eq!(count(Family::Prune), 6);
        for f in [Family::FinetuneAll, Family::ExtractAdv, Family::Transfer] {
            assert_eq!(count(f), 5);
        }
        let mut names: Vec<_> = jobs.iter().map(|j| j.0.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), jobs.len());
    }
}

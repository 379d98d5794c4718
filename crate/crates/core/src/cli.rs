//! The `sac` command line. Parsed commands are first resolved into a [`Run`]
//! (absolute paths, effective seed, configs inlined); that is what executes
//! and what gets echoed next to the outputs, so `sac replay` can rerun it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::correlation::{correlation_matrix, fingerprint_distance, CorrelationMatrix, KernelSpec, OutputKind, OutputMatrix};
use crate::error::{Error, Result};
use crate::fri::{fri_output_matrix, load_groups, AnswerTable, Verifier};
use crate::metrics::{evaluate, ScoredPool};
use crate::pipeline::{
    echo_path, exit_code, model_name, model_outputs, resolve_probes, run_pipeline, AuditConfig, ProbeSource, EXIT_ERROR,
    EXIT_OK,
};
use crate::probekit::{save_probe_set, Corruption, DEFAULT_PROBE_COUNT, DEFAULT_QUALITY};
use crate::verdict::{threshold_validation_mean, threshold_worst_irrelevant, AuditReport, ThresholdStrategy};
use crate::zoo::experiment::{self, ExperimentConfig};
use crate::zoo::{EmbeddingVerifier, SyntheticSpec, ZooModel};

pub const SEED_ENV: &str = "SAC_SEED";

#[derive(Parser, Debug)]
#[command(name = "sac", version, about = "Fingerprint classifiers by the correlation of their outputs on JPEG probes")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample images and JPEG-compress them into a probe set.
    ProbeGen(ProbeGenArgs),
    /// Query a model on a probe set.
    Outputs(OutputsArgs),
    /// Correlation matrix of an outputs file.
    Fingerprint(FingerprintArgs),
    /// Fingerprint distance between two fingerprints, printed as JSON.
    Compare(CompareArgs),
    /// Build a verification model's output matrix from reference-image pairs.
    Fri(FriArgs),
    /// Threshold suspects against irrelevant fingerprints. Exits 2 if any is stolen.
    Verdict(VerdictArgs),
    /// AUC, t-test and F1 of a scores file.
    Eval(EvalArgs),
    /// Model zoo experiments.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Run a full audit from a JSON config. Exits 2 if any suspect is stolen.
    Audit(AuditArgs),
    /// Rerun a command from its echo file.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct ProbeGenArgs {
    /// Image directory, or `synthetic` for the synthetic test split.
    #[arg(long)]
    pub input: String,
    /// Synthetic generator settings (JSON) when the input is `synthetic`.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROBE_COUNT)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_QUALITY)]
    pub quality: u8,
    /// Leave the probes uncompressed.
    #[arg(long, conflicts_with = "quality")]
    pub clean: bool,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Probability,
    Logit,
}

impl From<KindArg> for OutputKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Probability => OutputKind::Probability,
            KindArg::Logit => OutputKind::Logit,
        }
    }
}

#[derive(Args, Debug)]
pub struct OutputsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Probability)]
    pub kind: KindArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Cosine,
    Rbf,
}

#[derive(Args, Debug)]
pub struct FingerprintArgs {
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelArg::Cosine)]
    pub kernel: KernelArg,
    /// RBF bandwidth; the median pairwise distance when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub suspect: PathBuf,
    /// Also write the JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FriArgs {
    /// Directory written by the group exporter (groups.json plus pixels).
    #[arg(long)]
    pub groups: PathBuf,
    /// A `.sacm` model (embedding verifier) or an answers CSV.
    #[arg(long)]
    pub verifier: PathBuf,
    /// Cosine threshold for a model verifier; defaults to the one stored in the model.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_QUALITY)]
    pub quality: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerdictArgs {
    #[arg(long)]
    pub source_fp: PathBuf,
    #[arg(long, num_args = 1..)]
    pub suspect_fp: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub irrelevant_fp: Vec<PathBuf>,
    /// Adversarial-extraction fingerprints, needed by `validation-mean`.
    #[arg(long, num_args = 1..)]
    pub adv_fp: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ThresholdStrategy::WorstIrrelevant)]
    pub strategy: ThresholdStrategy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV with columns name,score,label.
    #[arg(long)]
    pub scores: PathBuf,
    /// Decision threshold; the smallest irrelevant score when omitted.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ZooCommand {
    /// Train a zoo, score every pool and write all artifacts.
    Run(ZooRunArgs),
}

#[derive(Args, Debug)]
pub struct ZooRunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// An echo file (`sac-run.json` or `<output>.run.json`).
    #[arg(long)]
    pub echo: PathBuf,
}

/// A fully resolved invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Run {
    ProbeGen {
        input: ProbeSource,
        count: usize,
        quality: Option<u8>,
        seed: u64,
        out: PathBuf,
    },
    Outputs {
        model: PathBuf,
        probes: PathBuf,
        kind: KindArg,
        out: PathBuf,
    },
    Fingerprint {
        outputs: PathBuf,
        kernel: KernelSpec,
        out: PathBuf,
    },
    Compare {
        source: PathBuf,
        suspect: PathBuf,
        out: Option<PathBuf>,
    },
    Fri {
        groups: PathBuf,
        verifier: PathBuf,
        tau: Option<f64>,
        quality: u8,
        out: PathBuf,
    },
    Verdict {
        source_fp: PathBuf,
        suspect_fp: Vec<PathBuf>,
        irrelevant_fp: Vec<PathBuf>,
        adv_fp: Vec<PathBuf>,
        strategy: ThresholdStrategy,
        out: PathBuf,
    },
    Eval {
        scores: PathBuf,
        threshold: Option<f64>,
        out: PathBuf,
    },
    ZooRun {
        config: Box<ExperimentConfig>,
        out: PathBuf,
    },
    Audit {
        config: Box<AuditConfig>,
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct Echo {
    tool: String,
    version: String,
    run: Run,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut json = serde_json::to_vec_pretty(value).expect("serializes");
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Resolve paths against the work directory, apply `SAC_SEED` and inline configs.
pub fn resolve(command: Command, workdir: &Path) -> Result<Run> {
    let base = std::path::absolute(workdir).map_err(|e| Error::io(workdir, e))?;
    let at = |p: PathBuf| base.join(p);
    let all = |v: Vec<PathBuf>| v.into_iter().map(|p| base.join(p)).collect::<Vec<_>>();
    Ok(match command {
        Command::ProbeGen(a) => {
            let input = if a.input == "synthetic" {
                let spec = match a.synthetic {
                    Some(p) => read_json(&at(p))?,
                    None => SyntheticSpec::default(),
                };
                ProbeSource::Synthetic(spec)
            } else {
                if a.synthetic.is_some() {
                    return Err(Error::InvalidConfig("--synthetic only applies to --input synthetic".into()));
                }
                ProbeSource::Dir { path: at(a.input.into()) }
            };
            Run::ProbeGen {
                input,
                count: a.count,
                quality: (!a.clean).then_some(a.quality),
                seed: a.seed,
                out: at(a.out),
            }
        }
        Command::Outputs(a) => Run::Outputs {
            model: at(a.model),
            probes: at(a.probes),
            kind: a.kind,
            out: at(a.out),
        },
        Command::Fingerprint(a) => Run::Fingerprint {
            outputs: at(a.outputs),
            kernel: match (a.kernel, a.bandwidth) {
                (KernelArg::Cosine, None) => KernelSpec::Cosine,
                (KernelArg::Cosine, Some(_)) => {
                    return Err(Error::InvalidConfig("--bandwidth only applies to --kernel rbf".into()))
                }
                (KernelArg::Rbf, bandwidth) => KernelSpec::Rbf { bandwidth },
            },
            out: at(a.out),
        },
        Command::Compare(a) => Run::Compare {
            source: at(a.source),
            suspect: at(a.suspect),
            out: a.out.map(at),
        },
        Command::Fri(a) => Run::Fri {
            groups: at(a.groups),
            verifier: at(a.verifier),
            tau: a.tau,
            quality: a.quality,
            out: at(a.out),
        },
        Command::Verdict(a) => Run::Verdict {
            source_fp: at(a.source_fp),
            suspect_fp: all(a.suspect_fp),
            irrelevant_fp: all(a.irrelevant_fp),
            adv_fp: all(a.adv_fp),
            strategy: a.strategy,
            out: at(a.out),
        },
        Command::Eval(a) => Run::Eval {
            scores: at(a.scores),
            threshold: a.threshold,
            out: at(a.out),
        },
        Command::Zoo(ZooCommand::Run(a)) => {
            let path = at(a.config);
            let mut config = ExperimentConfig::load(&path)?;
            if let Some(seed) = env_seed()? {
                config.seed = seed;
            }
            if let experiment::DatasetConfig::Cifar { path: p } = &mut config.dataset {
                *p = base.join(&*p);
            }
            Run::ZooRun {
                config: Box::new(config),
                out: at(a.out),
            }
        }
        Command::Audit(a) => {
            let path = at(a.config);
            let mut config = AuditConfig::load(&path)?;
            if let Some(seed) = env_seed()? {
                config.seed = seed;
            }
            config.rebase(&base);
            Run::Audit {
                config: Box::new(config),
                out: at(a.out),
            }
        }
        Command::Replay(a) => {
            let echo: Echo = read_json(&at(a.echo))?;
            echo.run
        }
    })
}

fn load_fingerprints(paths: &[PathBuf]) -> Result<Vec<(String, CorrelationMatrix)>> {
    paths
        .iter()
        .map(|p| Ok((model_name(p), CorrelationMatrix::load(p)?)))
        .collect()
}

fn distances_to(source: &CorrelationMatrix, set: &[(String, CorrelationMatrix)]) -> Result<Vec<f64>> {
    set.iter()
        .map(|(_, fp)| Ok(fingerprint_distance(source, fp)?.value))
        .collect()
}

fn print_report(report: &AuditReport) {
    println!(
        "threshold {:.6} ({:?}, {} kernel)",
        report.threshold.value,
        report.threshold.strategy,
        report.kernel.name()
    );
    for s in &report.suspects {
        println!("{:<32} {:.6} {:?}", s.name, s.distance, s.decision);
    }
    if let Some(m) = &report.metrics {
        let p = m.p_value.map(|p| format!("  p {p:.3e}")).unwrap_or_default();
        println!("auc {:.4}{p}  f1 {:.4}", m.auc, m.f1);
    }
}

impl Run {
    /// Where the echo goes, if this run writes anything.
    pub fn echo_file(&self) -> Option<PathBuf> {
        match self {
            Run::ProbeGen { out, .. } | Run::ZooRun { out, .. } => Some(echo_path(out, true)),
            Run::Outputs { out, .. }
            | Run::Fingerprint { out, .. }
            | Run::Fri { out, .. }
            | Run::Verdict { out, .. }
            | Run::Eval { out, .. }
            | Run::Audit { out, .. } => Some(echo_path(out, false)),
            Run::Compare { out, .. } => out.as_deref().map(|o| echo_path(o, false)),
        }
    }

    /// Execute and write the echo; returns the process exit code.
    pub fn execute(&self) -> Result<i32> {
        let code = self.execute_inner()?;
        if let Some(path) = self.echo_file() {
            write_json(
                &path,
                &Echo {
                    tool: "sac".into(),
                    version: env!("CARGO_PKG_VERSION").into(),
                    run: self.clone(),
                },
            )?;
        }
        Ok(code)
    }

    fn execute_inner(&self) -> Result<i32> {
        match self {
            Run::ProbeGen {
                input,
                count,
                quality,
                seed,
                out,
            } => {
                let corruption = match quality {
                    Some(q) => Corruption::jpeg(*q)?,
                    None => Corruption::None,
                };
                let set = resolve_probes(input, *count, corruption, *seed)?;
                save_probe_set(&set, out)?;
                println!("{} probes, digest {}", set.len(), set.digest());
            }
            Run::Outputs {
                model,
                probes,
                kind,
                out,
            } => {
                let m = model_outputs(model, probes, (*kind).into())?;
                m.save(out)?;
                println!("{}x{} outputs for probes {}", m.rows(), m.dims(), m.probe_digest().short());
            }
            Run::Fingerprint { outputs, kernel, out } => {
                let fp = correlation_matrix(&OutputMatrix::load(outputs)?, *kernel)?;
                fp.save(out)?;
                println!("{0}x{0} {1} fingerprint, digest {2}", fp.n(), fp.kernel().name(), fp.digest());
            }
            Run::Compare { source, suspect, out } => {
                let d = fingerprint_distance(&CorrelationMatrix::load(source)?, &CorrelationMatrix::load(suspect)?)?;
                println!("{}", serde_json::to_string(&d).expect("serializes"));
                if let Some(out) = out {
                    write_json(out, &d)?;
                }
            }
            Run::Fri {
                groups,
                verifier,
                tau,
                quality,
                out,
            } => {
                let groups = load_groups(groups)?;
                let is_csv = verifier.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
                let v: Box<dyn Verifier> = if is_csv {
                    if tau.is_some() {
                        return Err(Error::InvalidConfig("--tau applies to model verifiers only".into()));
                    }
                    Box::new(AnswerTable::read_csv(verifier)?)
                } else {
                    let model = ZooModel::load(verifier)?;
                    Box::new(match tau {
                        Some(t) => EmbeddingVerifier::new(model, *t)?,
                        None => EmbeddingVerifier::from_model(model)?,
                    })
                };
                let m = fri_output_matrix(&groups, v.as_ref(), *quality)?;
                m.save(out)?;
                println!("{}x{} feature matrix", m.rows(), m.dims());
            }
            Run::Verdict {
                source_fp,
                suspect_fp,
                irrelevant_fp,
                adv_fp,
                strategy,
                out,
            } => {
                let source = CorrelationMatrix::load(source_fp)?;
                let irrelevant = load_fingerprints(irrelevant_fp)?;
                let adv = load_fingerprints(adv_fp)?;
                let irr_d = distances_to(&source, &irrelevant)?;
                let threshold = match strategy {
                    ThresholdStrategy::WorstIrrelevant => threshold_worst_irrelevant(&irr_d)?,
                    ThresholdStrategy::ValidationMean => {
                        threshold_validation_mean(&irr_d, &distances_to(&source, &adv)?)?
                    }
                };
                let mut pool: Vec<_> = irrelevant.iter().map(|(_, fp)| fp.digest()).collect();
                if *strategy == ThresholdStrategy::ValidationMean {
                    pool.extend(adv.iter().map(|(_, fp)| fp.digest()));
                }
                let suspects = load_fingerprints(suspect_fp)?
                    .into_iter()
                    .map(|(name, fp)| Ok((name, fingerprint_distance(&source, &fp)?)))
                    .collect::<Result<Vec<_>>>()?;
                let report =
                    AuditReport::build(source.probe_digest(), source.kernel(), threshold.with_pool(pool), suspects);
                report.save(out)?;
                print_report(&report);
                return Ok(exit_code(&report));
            }
            Run::Eval { scores, threshold, out } => {
                let report = evaluate(&ScoredPool::read_csv(scores)?, *threshold)?;
                write_json(out, &report)?;
                println!("{}", serde_json::to_string(&report).expect("serializes"));
            }
            Run::ZooRun { config, out } => {
                let (zoo, suite, report) = experiment::run(config)?;
                experiment::write_artifacts(&zoo, &suite, &report, out)?;
                println!("source accuracy {:.4}", report.source_accuracy);
                for p in &report.pools {
                    let baseline = p.auc_baseline.map(|b| format!(", baseline {b:.3}")).unwrap_or_default();
                    println!(
                        "{:<14} auc {:.3} (n/2 {:.3}, clean {:.3}{baseline})",
                        p.family, p.auc_jc, p.auc_jc_small, p.auc_clean
                    );
                }
                if let Some(f) = &report.fri {
                    println!("fri success rate {:.2}", f.success_rate);
                }
            }
            Run::Audit { config, out } => {
                let report = run_pipeline(config)?;
                report.save(out)?;
                print_report(&report);
                return Ok(exit_code(&report));
            }
        }
        Ok(EXIT_OK)
    }
}

/// Parse `args`, run, and map the outcome to an exit code. Errors are
/// reported on stderr as one JSON object.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match resolve(cli.command, &cli.workdir).and_then(|run| run.execute()) {
        Ok(code) => code,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            EXIT_ERROR
        }
    }
}

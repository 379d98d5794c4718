//! Drives the `sac` binary end to end on a tiny zoo.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;

use sac::correlation::OutputMatrix;
use sac::fri::{save_groups, AnswerTable, IdentityGroup};
use sac::verdict::{AuditReport, Decision};
use sac::zoo::{gen_synthetic, EmbeddingVerifier, SyntheticSpec, ZooModel};

const ARCH: &str = r#"{"width": 8, "height": 8, "channels": 3, "hidden": [24, 12], "classes": 4}"#;
const DATA: &str = r#"{"classes": 4, "per_class": 60, "test_per_class": 20, "size": 8}"#;

fn tiny_config() -> String {
    format!(
        r#"{{"seed": 3,
 "dataset": {{"kind": "synthetic", "classes": 4, "per_class": 60, "test_per_class": 20, "size": 8}},
 "source": {ARCH},
 "train": {{"epochs": 6}},
 "irrelevant": {{"archs": [{ARCH}], "per_arch": 3}},
 "attacks": {{"finetune_all": {{"count": 2}}, "finetune_last": {{"count": 0}},
   "prune": {{"fractions": [0.25], "per_fraction": 1, "holdout": 40}},
   "extract_label": {{"count": 1, "epochs": 2, "students": [{ARCH}]}},
   "extract_prob": {{"count": 0}}, "extract_adv": {{"count": 0}}, "adv_train": {{"count": 0}}, "transfer": {{"count": 0}}}},
 "probes": {{"count": 16, "small_count": 8}},
 "fri": {{"trials": 2, "targets": 4, "references": 8, "calibration_pairs": 20}}
}}"#
    )
}

fn sac(args: &[&str]) -> Output {
    sac_env(args, &[])
}

fn sac_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sac"));
    cmd.args(args).env_remove("SAC_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Shared workspace holding a trained tiny zoo and a probe set.
static WORK: LazyLock<PathBuf> = LazyLock::new(|| {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("sac-cli");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("zoo.json"), tiny_config()).unwrap();
    std::fs::write(dir.join("data.json"), DATA).unwrap();
    let d = dir.to_str().unwrap();
    let o = sac(&["--workdir", d, "zoo", "run", "--config", "zoo.json", "--out", "zoo"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sac(&[
        "--workdir", d, "probe-gen", "--input", "synthetic", "--synthetic", "data.json", "--count", "16", "--seed", "5",
        "--out", "probes",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
});

fn work() -> &'static Path {
    WORK.as_path()
}

fn w(rel: &str) -> String {
    work().join(rel).to_str().unwrap().to_string()
}

fn model(name: &str) -> String {
    w(&format!("zoo/models/{name}.sacm"))
}

fn fingerprint_of(name: &str, tag: &str) -> String {
    let out = w(&format!("{tag}/{name}.saco"));
    let fp = w(&format!("{tag}/{name}.sacc"));
    let o = sac(&["outputs", "--model", &model(name), "--probes", &w("probes"), "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sac(&["fingerprint", "--outputs", &out, "--out", &fp]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fp
}

#[test]
fn zoo_run_writes_every_artifact() {
    for f in ["config.json", "report.json", "scores.csv", "scores_small.csv", "scores_clean.csv", "sac-run.json"] {
        assert!(work().join("zoo").join(f).exists(), "{f} missing");
    }
    for d in ["models", "outputs", "fingerprints", "probes", "probes_clean", "fri_groups"] {
        assert!(work().join("zoo").join(d).is_dir(), "{d} missing");
    }
    assert!(work().join("zoo/models/source.sacm").exists());
}

#[test]
fn exported_fri_groups_feed_the_fri_command() {
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(work().join("zoo/report.json")).unwrap()).unwrap();
    let tau = report["fri"]["tau_source"].as_f64().unwrap().to_string();
    let out = w("fri/exported.saco");
    let o = sac(&["fri", "--groups", &w("zoo/fri_groups"), "--verifier", &model("source"), "--tau", &tau, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(OutputMatrix::load(&out).unwrap().rows(), 4);
}

#[test]
fn outputs_are_deterministic_probabilities() {
    let a = w("det/a.saco");
    let b = w("det/b.saco");
    for out in [&a, &b] {
        let o = sac(&["outputs", "--model", &model("source"), "--probes", &w("probes"), "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = OutputMatrix::load(&a).unwrap();
    assert_eq!((m.rows(), m.dims()), (16, 4));
    for row in m.values().rows() {
        assert!((row.sum() - 1.0).abs() <= 1e-9);
    }
    assert!(Path::new(&format!("{a}.run.json")).exists());
}

#[test]
fn compare_prints_distance_json() {
    let src = fingerprint_of("source", "cmp");
    let other = fingerprint_of("irrelevant_mlp0_0", "cmp");
    let o = sac(&["compare", "--source", &src, "--suspect", &src]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["value"], 0.0);
    let o = sac(&["compare", "--source", &src, "--suspect", &other]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn mismatched_probe_sets_fail_with_a_structured_error() {
    let src = fingerprint_of("source", "mis");
    let zoo_fp = std::fs::read_dir(work().join("zoo/fingerprints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "sacc"))
        .unwrap();
    let o = sac(&["compare", "--source", &src, "--suspect", zoo_fp.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"], "probe_set_mismatch");
}

#[test]
fn verdict_exit_codes_gate_on_stolen() {
    let src = fingerprint_of("source", "ver");
    let irr: Vec<String> = (0..3).map(|i| fingerprint_of(&format!("irrelevant_mlp0_{i}"), "ver")).collect();
    let out = w("ver/report.json");
    let mut args = vec!["verdict", "--source-fp", &src, "--suspect-fp", &src, "--irrelevant-fp"];
    args.extend(irr.iter().map(String::as_str));
    args.extend(["--out", &out]);
    let o = sac(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r = AuditReport::load(&out).unwrap();
    assert_eq!(r.suspects[0].decision, Decision::Stolen);
    assert_eq!(r.threshold.pool.len(), 3);

    let o = sac(&["verdict", "--source-fp", &src, "--irrelevant-fp", &irr[0], "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(AuditReport::load(&out).unwrap().suspects.is_empty());

    let o = sac(&["verdict", "--source-fp", &src, "--irrelevant-fp", &irr[0], "--strategy", "validation-mean", "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("empty_pool"));
}

fn audit_config(suspects: &[&str]) -> String {
    let list = |v: &[String]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
    let suspects: Vec<String> = suspects.iter().map(|s| format!("zoo/models/{s}.sacm")).collect();
    let irrelevant: Vec<String> = (0..2).map(|i| format!("zoo/models/irrelevant_mlp0_{i}.sacm")).collect();
    format!(
        r#"{{"seed": 1, "probes": {{"kind": "probe_set", "path": "probes"}}, "source": "zoo/models/source.sacm",
 "suspects": [{}], "irrelevant": [{}]}}"#,
        list(&suspects),
        list(&irrelevant)
    )
}

#[test]
fn audit_of_the_source_itself_is_stolen() {
    std::fs::write(work().join("audit_self.json"), audit_config(&["source", "irrelevant_mlp0_2"])).unwrap();
    let o = sac(&["--workdir", work().to_str().unwrap(), "audit", "--config", "audit_self.json", "--out", "audit/self.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r = AuditReport::load(work().join("audit/self.json")).unwrap();
    let me = r.suspects.iter().find(|s| s.name == "source").unwrap();
    assert_eq!((me.distance, me.decision), (0.0, Decision::Stolen));
    let m = r.metrics.expect("both labels present");
    assert_eq!(m.counts.tp, 1);
}

#[test]
fn audit_without_suspects_has_no_metrics() {
    std::fs::write(work().join("audit_empty.json"), audit_config(&[])).unwrap();
    let o = sac(&["--workdir", work().to_str().unwrap(), "audit", "--config", "audit_empty.json", "--out", "audit/empty.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let raw = std::fs::read_to_string(work().join("audit/empty.json")).unwrap();
    assert!(!raw.contains("metrics"));
}

#[test]
fn seed_environment_overrides_config_and_flag_default() {
    std::fs::write(work().join("audit_seed.json"), audit_config(&[])).unwrap();
    let o = sac_env(
        &["--workdir", work().to_str().unwrap(), "audit", "--config", "audit_seed.json", "--out", "audit/seed.json"],
        &[("SAC_SEED", "42")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work().join("audit/seed.json.run.json")).unwrap()).unwrap();
    assert_eq!(echo["run"]["config"]["seed"], 42);

    let out = w("seeded_probes");
    let o = sac_env(
        &["probe-gen", "--input", "synthetic", "--synthetic", &w("data.json"), "--count", "8", "--out", &out],
        &[("SAC_SEED", "7")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work().join("seeded_probes/sac-run.json")).unwrap()).unwrap();
    assert_eq!(echo["run"]["seed"], 7);

    let o = sac_env(&["probe-gen", "--input", "synthetic", "--out", &out], &[("SAC_SEED", "x")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn replay_reproduces_outputs_byte_for_byte() {
    let out = w("replay/source.saco");
    let o = sac(&["outputs", "--model", &model("source"), "--probes", &w("probes"), "--kind", "logit", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read(&out).unwrap();
    std::fs::remove_file(&out).unwrap();
    let o = sac(&["replay", "--echo", &format!("{out}.run.json")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&out).unwrap(), first);
    assert_eq!(OutputMatrix::load(&out).unwrap().kind(), sac::correlation::OutputKind::Logit);
}

#[test]
fn fri_accepts_models_and_answer_tables() {
    let data = gen_synthetic(&serde_json::from_str::<SyntheticSpec>(DATA).unwrap()).unwrap();
    let groups: Vec<IdentityGroup> = (0..4)
        .map(|k| {
            let idx = data.test.indices_of(k);
            let imgs: Vec<_> = idx.iter().map(|&i| data.test.images[i].clone()).collect();
            IdentityGroup::new(format!("id{k}"), imgs[0].clone(), imgs[1..9].to_vec()).unwrap()
        })
        .collect();
    let gdir = work().join("fri/groups");
    save_groups(&groups, &gdir).unwrap();
    let verifier = EmbeddingVerifier::new(ZooModel::load(model("source")).unwrap(), 0.5).unwrap();
    let csv = work().join("fri/answers.csv");
    AnswerTable::record(&groups, &verifier, 10).unwrap().write_csv(&csv).unwrap();

    let g = gdir.to_str().unwrap();
    let from_model = w("fri/model.saco");
    let from_csv = w("fri/csv.saco");
    let o = sac(&["fri", "--groups", g, "--verifier", &model("source"), "--tau", "0.5", "--out", &from_model]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sac(&["fri", "--groups", g, "--verifier", csv.to_str().unwrap(), "--out", &from_csv]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&from_model).unwrap(), std::fs::read(&from_csv).unwrap());
    assert_eq!(OutputMatrix::load(&from_csv).unwrap().rows(), 4);

    // the plain zoo model carries no calibrated threshold
    let o = sac(&["fri", "--groups", g, "--verifier", &model("source"), "--out", &from_model]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("calibration"));
}

#[test]
fn eval_scores_zoo_csv() {
    let out = w("eval/eval.json");
    let o = sac(&["eval", "--scores", &w("zoo/scores.csv"), "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&v["auc"].as_f64().unwrap()));
}

#[test]
fn unknown_flags_and_bad_values_are_errors() {
    let o = sac(&["compare", "--source", "a", "--suspect", "b", "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--frobnicate"));
    assert_eq!(code(&sac(&["fingerprint", "--outputs", "x", "--kernel", "poly", "--out", "y"])), 1);
    assert_eq!(code(&sac(&["fingerprint", "--outputs", "x", "--bandwidth", "1", "--out", "y"])), 1);
    assert_eq!(code(&sac(&["probe-gen", "--input", "/nonexistent", "--out", "/tmp/never"])), 1);
    let help = sac(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for c in ["probe-gen", "outputs", "fingerprint", "compare", "fri", "verdict", "eval", "zoo", "audit", "replay"] {
        assert!(text.contains(c), "{c} missing from help");
    }
}

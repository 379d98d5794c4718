use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use sac::probekit::{build_probe_set, save_probe_set, RawImage};
use sac::zoo::{Arch, Lineage, ZooModel};
use sac_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn images(n: usize, seed: u8) -> Vec<RawImage> {
    (0..n)
        .map(|i| {
            let px = (0..8 * 8 * 3)
                .map(|j| ((j * 37 + i * 101) as u8).wrapping_mul(seed | 1))
                .collect();
            RawImage::new(8, 8, 3, px).unwrap()
        })
        .collect()
}

fn arch() -> Arch {
    Arch {
        width: 8,
        height: 8,
        channels: 3,
        stem: None,
        hidden: vec![10, 6],
        classes: 4,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    probes: CString,
    other_probes: CString,
    model: CString,
    other_model: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let imgs = images(30, 3);
    save_probe_set(&build_probe_set(&imgs, 12, 20, 1).unwrap(), dir.path().join("p")).unwrap();
    save_probe_set(&build_probe_set(&imgs, 12, 20, 2).unwrap(), dir.path().join("q")).unwrap();
    ZooModel::init(arch(), Lineage::Source, 5).unwrap().save(dir.path().join("m.sacm")).unwrap();
    ZooModel::init(arch(), Lineage::Irrelevant { seed: 6 }, 6)
        .unwrap()
        .save(dir.path().join("n.sacm"))
        .unwrap();
    Fixture {
        probes: cpath(&dir.path().join("p")),
        other_probes: cpath(&dir.path().join("q")),
        model: cpath(&dir.path().join("m.sacm")),
        other_model: cpath(&dir.path().join("n.sacm")),
        _dir: dir,
    }
}

fn last_error() -> String {
    let p = sac_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn fingerprint(model: &CString, probes: &CString) -> *mut SacFingerprint {
    let mut m = ptr::null_mut();
    let mut p = ptr::null_mut();
    let mut o = ptr::null_mut();
    let mut f = ptr::null_mut();
    assert_eq!(sac_model_load(model.as_ptr(), &mut m), SacStatus::Ok);
    assert_eq!(sac_probe_set_load(probes.as_ptr(), &mut p), SacStatus::Ok);
    assert_eq!(sac_model_outputs(m, p, SacOutputKind::Probability, &mut o), SacStatus::Ok);
    assert_eq!(sac_fingerprint_new(o, SacKernel::Cosine, 0.0, &mut f), SacStatus::Ok);
    sac_outputs_free(o);
    sac_probe_set_free(p);
    sac_model_free(m);
    f
}

#[test]
fn self_distance_is_zero_and_other_is_positive() {
    let fx = fixture();
    unsafe {
        let a = fingerprint(&fx.model, &fx.probes);
        let b = fingerprint(&fx.model, &fx.probes);
        let c = fingerprint(&fx.other_model, &fx.probes);
        let mut d = -1.0;
        assert_eq!(sac_fingerprint_distance(a, b, &mut d), SacStatus::Ok);
        assert_eq!(d, 0.0);
        assert_eq!(sac_fingerprint_distance(a, c, &mut d), SacStatus::Ok);
        assert!(d > 0.0);
        assert_eq!(sac_is_stolen(0.0, 0.0), 1);
        assert_eq!(sac_is_stolen(d, 0.0), 0);
        sac_fingerprint_free(a);
        sac_fingerprint_free(b);
        sac_fingerprint_free(c);
    }
}

#[test]
fn external_outputs_match_model_outputs() {
    let fx = fixture();
    let model = ZooModel::load(fx.model.to_str().unwrap()).unwrap();
    let set = sac::probekit::load_probe_set(fx.probes.to_str().unwrap()).unwrap();
    let probs = model.probabilities(&set.images().collect::<Vec<_>>()).unwrap();
    let flat: Vec<f64> = probs.iter().copied().collect();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(sac_probe_set_load(fx.probes.as_ptr(), &mut p), SacStatus::Ok);
        assert_eq!(sac_probe_set_len(p), 12);
        let mut o = ptr::null_mut();
        let st = sac_outputs_new(p, flat.as_ptr(), 12, 4, SacOutputKind::Probability, &mut o);
        assert_eq!(st, SacStatus::Ok);
        let (mut r, mut c) = (0, 0);
        assert_eq!(sac_outputs_shape(o, &mut r, &mut c), SacStatus::Ok);
        assert_eq!((r, c), (12, 4));
        let mut ext = ptr::null_mut();
        assert_eq!(sac_fingerprint_new(o, SacKernel::Rbf, 0.0, &mut ext), SacStatus::Ok);

        let mut wrong = ptr::null_mut();
        let st = sac_outputs_new(p, flat.as_ptr(), 11, 4, SacOutputKind::Probability, &mut wrong);
        assert_eq!(st, SacStatus::ShapeMismatch);
        assert!(wrong.is_null());

        let a = fingerprint(&fx.model, &fx.probes);
        let mut d = 0.0;
        assert_eq!(sac_fingerprint_distance(a, ext, &mut d), SacStatus::KernelMismatch);
        assert!(last_error().starts_with("kernel_mismatch"));
        sac_fingerprint_free(a);
        sac_fingerprint_free(ext);
        sac_outputs_free(o);
        sac_probe_set_free(p);
    }
}

#[test]
fn files_roundtrip() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let fp_path = cpath(&dir.path().join("a.sacc"));
    unsafe {
        let a = fingerprint(&fx.model, &fx.probes);
        assert_eq!(sac_fingerprint_save(a, fp_path.as_ptr()), SacStatus::Ok);
        let mut b = ptr::null_mut();
        assert_eq!(sac_fingerprint_load(fp_path.as_ptr(), &mut b), SacStatus::Ok);
        let mut d = 1.0;
        assert_eq!(sac_fingerprint_distance(a, b, &mut d), SacStatus::Ok);
        assert_eq!(d, 0.0);
        sac_fingerprint_free(a);
        sac_fingerprint_free(b);
    }
}

#[test]
fn errors_set_status_and_message() {
    let fx = fixture();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sac_model_load(ptr::null(), &mut m), SacStatus::NullArgument);
        assert!(last_error().contains("null"));
        let missing = CString::new("/nonexistent/model.sacm").unwrap();
        assert_eq!(sac_model_load(missing.as_ptr(), &mut m), SacStatus::Io);
        assert!(m.is_null());
        assert_eq!(sac_model_load(fx.probes.as_ptr(), ptr::null_mut()), SacStatus::Io);

        let a = fingerprint(&fx.model, &fx.probes);
        let b = fingerprint(&fx.model, &fx.other_probes);
        let mut d = 0.0;
        assert_eq!(sac_fingerprint_distance(a, b, &mut d), SacStatus::ProbeSetMismatch);
        assert_eq!(sac_fingerprint_distance(a, ptr::null(), &mut d), SacStatus::NullArgument);
        sac_fingerprint_free(a);
        sac_fingerprint_free(b);

        let mut t = 0.0;
        assert_eq!(sac_threshold_worst_irrelevant(ptr::null(), 0, &mut t), SacStatus::EmptyPool);
        let ds = [0.3, 0.1, 0.2];
        assert_eq!(sac_threshold_worst_irrelevant(ds.as_ptr(), 3, &mut t), SacStatus::Ok);
        assert_eq!(t, 0.1);
        assert!(sac_last_error().is_null());

        sac_model_free(ptr::null_mut());
        sac_fingerprint_free(ptr::null_mut());
    }
}

#[test]
fn audit_of_source_against_itself() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = audit_config_json(&fx);
    let cfg_path = dir.path().join("audit.json");
    std::fs::write(&cfg_path, config).unwrap();
    let report = dir.path().join("report.json");
    let mut code = -1;
    unsafe {
        let st = sac_audit_run(cpath(&cfg_path).as_ptr(), cpath(&report).as_ptr(), &mut code);
        assert_eq!(st, SacStatus::Ok, "{}", last_error());
    }
    assert_eq!(code, 2);
    let r = sac::verdict::AuditReport::load(&report).unwrap();
    assert_eq!(r.suspects[0].distance, 0.0);
}

fn audit_config_json(fx: &Fixture) -> String {
    format!(
        r#"{{"probes": {{"kind": "probe_set", "path": {:?}}}, "source": {:?}, "suspects": [{:?}], "irrelevant": [{:?}]}}"#,
        fx.probes.to_str().unwrap(),
        fx.model.to_str().unwrap(),
        fx.model.to_str().unwrap(),
        fx.other_model.to_str().unwrap()
    )
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sac.h")).unwrap();
    for name in [
        "sac_last_error",
        "sac_model_load",
        "sac_model_outputs",
        "sac_outputs_new",
        "sac_fingerprint_new",
        "sac_fingerprint_distance",
        "sac_threshold_worst_irrelevant",
        "sac_audit_run",
        "typedef struct SacModel SacModel",
        "SAC_STATUS_PROBE_SET_MISMATCH = 7",
    ] {
        assert!(header.contains(name), "{name} missing from sac.h");
    }
    assert_eq!(unsafe { CStr::from_ptr(sac_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // test builds only produce the rlib, so ask cargo for the static library
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let built = std::process::Command::new(cargo)
        .args(["build", "--quiet", "--lib", "-p", "sac-ffi"])
        .current_dir(manifest)
        .status()
        .unwrap();
    assert!(built.success());
    // tests run from target/debug/deps; the library sits one level up
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    assert!(lib_dir.join("libsac_ffi.a").exists(), "static library missing from {}", lib_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(lib_dir.join("libsac_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler (cc) is required");
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

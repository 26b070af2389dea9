use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use beliefplan_ffi::*;

const TOY: &str = "[observation]\nagents = 6\nhistory = 5\npolylines = 12\nwaypoints = 6\ntracked = 3\n\
[model]\nhidden = 8\nlayers = 1\nmodes = 2\nfuture = 20\nego_steps = 5\ndecoder_hidden = 16\nq_hidden = 16\n\
[planner]\niterations = 20\nhorizon = 40\n";

fn last_error() -> String {
    let p = bp_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { bp_string_free(p) };
    s
}

fn config(text: &str) -> *mut BpConfig {
    let t = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { bp_config_from_toml(t.as_ptr(), &mut cfg) }, BpStatus::Ok);
    cfg
}

#[test]
fn episode_round_trip_through_handles() {
    let tmp = tempfile::TempDir::new().unwrap();
    let cfg = config(TOY);
    let kind = CString::new("merge").unwrap();
    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(bp_scenario_generate(cfg, kind.as_ptr(), 3, &mut sc), BpStatus::Ok);
        assert!(bp_scenario_agent_count(sc) > 0);
        let mut model = ptr::null_mut();
        assert_eq!(bp_model_new(cfg, 1, &mut model), BpStatus::Ok);

        let mut a = BpEpisodeSummary::default();
        assert_eq!(bp_run_episode(cfg, model, sc, 0, &mut a), BpStatus::Ok);
        assert!(a.task_time > 0 && a.decisions > 0 && a.reward.is_finite());

        let ck = CString::new(tmp.path().join("m.ckpt").to_str().unwrap()).unwrap();
        let scp = CString::new(tmp.path().join("s.json").to_str().unwrap()).unwrap();
        assert_eq!(bp_model_save(model, cfg, ck.as_ptr(), 1), BpStatus::Ok);
        assert_eq!(bp_scenario_save(sc, scp.as_ptr()), BpStatus::Ok);
        let mut model2 = ptr::null_mut();
        let mut sc2 = ptr::null_mut();
        assert_eq!(bp_model_load(cfg, ck.as_ptr(), &mut model2), BpStatus::Ok);
        assert_eq!(bp_scenario_load(scp.as_ptr(), &mut sc2), BpStatus::Ok);
        let mut b = BpEpisodeSummary::default();
        assert_eq!(bp_run_episode(cfg, model2, sc2, 0, &mut b), BpStatus::Ok);
        assert_eq!(a, b);

        bp_model_free(model);
        bp_model_free(model2);
        bp_scenario_free(sc);
        bp_scenario_free(sc2);
        bp_config_free(cfg);
    }
}

#[test]
fn errors_report_status_and_message() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new("[model]\nheads = 3\n").unwrap();
        assert_eq!(bp_config_from_toml(bad.as_ptr(), &mut cfg), BpStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("heads"));

        assert_eq!(bp_config_from_toml(ptr::null(), &mut cfg), BpStatus::NullPointer);
        assert!(last_error().contains("null"));

        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(bp_config_from_toml(invalid.as_ptr().cast(), &mut cfg), BpStatus::InvalidUtf8);

        assert_eq!(bp_config_default(&mut cfg), BpStatus::Ok);
        let missing = CString::new("/nonexistent/x.json").unwrap();
        let mut sc = ptr::null_mut();
        assert_eq!(bp_scenario_load(missing.as_ptr(), &mut sc), BpStatus::Io);
        let kind = CString::new("roundabout").unwrap();
        assert_eq!(bp_scenario_generate(cfg, kind.as_ptr(), 0, &mut sc), BpStatus::Config);
        let mut model = ptr::null_mut();
        assert_eq!(bp_model_load(cfg, missing.as_ptr(), &mut model), BpStatus::Config);
        let mut s = BpEpisodeSummary::default();
        assert_eq!(bp_run_episode(cfg, ptr::null(), ptr::null(), 0, &mut s), BpStatus::NullPointer);

        let h = bp_config_hash(cfg);
        assert_eq!(CStr::from_ptr(h).to_bytes().len(), 64);
        bp_string_free(h);
        assert!(bp_config_hash(ptr::null()).is_null());
        bp_config_free(cfg);
        bp_config_free(ptr::null_mut());
        bp_string_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(bp_version()) }.to_str().unwrap().is_empty());
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(crate_dir().join("include/beliefplan.h")).unwrap();
    for name in [
        "bp_last_error",
        "bp_string_free",
        "bp_config_from_toml",
        "bp_model_load",
        "bp_scenario_generate",
        "bp_run_episode",
        "typedef struct BpModel BpModel",
        "BP_STATUS_NUMERICAL = 5",
    ] {
        assert!(h.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_the_library() {
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let so = lib_dir.join("libbeliefplan_ffi.so");
    if !so.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no shared library or C compiler");
        return;
    }
    let tmp = tempfile::TempDir::new().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <math.h>
#include "beliefplan.h"
int main(void) {
    BpConfig *cfg = NULL;
    if (bp_config_from_toml("[planner]\niterations = 10\n", &cfg) != BP_STATUS_OK) return 1;
    BpScenario *sc = NULL;
    if (bp_scenario_generate(cfg, "lane-follow", 2, &sc) != BP_STATUS_OK) return 2;
    BpModel *m = NULL;
    if (bp_model_new(cfg, 0, &m) != BP_STATUS_OK) return 3;
    BpEpisodeSummary s;
    if (bp_run_episode(cfg, m, sc, 0, &s) != BP_STATUS_OK) return 4;
    if (bp_scenario_generate(cfg, "nope", 0, &sc) != BP_STATUS_CONFIG) return 5;
    char *err = bp_last_error();
    printf("%llu %s\n", (unsigned long long)s.task_time, err);
    bp_string_free(err);
    bp_model_free(m);
    bp_scenario_free(sc);
    bp_config_free(cfg);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lbeliefplan_ffi", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "exit {:?}: {text}", out.status.code());
    assert!(text.contains("unknown scenario kind"), "{text}");
}

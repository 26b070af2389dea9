//! C ABI over `beliefplan`.
//!
//! Objects are opaque handles created by `bp_*_new`/`bp_*_load` style calls
//! and released with the matching `bp_*_free`. Every fallible call returns a
//! [`BpStatus`]; on failure [`bp_last_error`] describes the most recent error
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use beliefplan::commands::generator_params;
use beliefplan::config::RunConfig;
use beliefplan::model::Model;
use beliefplan::runner::{run_episode, PolicySettings};
use beliefplan::simulator::{generate_scenario, Scenario, ScenarioKind};
use beliefplan::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Numerical = 5,
    Format = 6,
    Panic = 7,
}

pub struct BpConfig(RunConfig);
pub struct BpModel(Model);
pub struct BpScenario(Scenario);

/// Outcome of one closed-loop episode. Prediction metrics are NaN when the
/// episode had nothing to score.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BpEpisodeSummary {
    pub success: bool,
    pub reward: f64,
    pub task_time: u64,
    pub log_divergence: f64,
    pub min_ade: f64,
    pub consistency: f64,
    pub score_accuracy: f64,
    pub decisions: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BpStatus {
    match e {
        Error::Io(_) => BpStatus::Io,
        Error::Numerical(_) | Error::NonFiniteGradient(_) | Error::OffRoute { .. } => BpStatus::Numerical,
        Error::Format(_) => BpStatus::Format,
        Error::Config(_) | Error::Shape(_) | Error::Usage(_) => BpStatus::Config,
    }
}

/// Runs `f`, turning errors and panics into a status plus a last-error message.
fn guard(f: impl FnOnce() -> Result<(), BpStatus>) -> BpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BpStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BpStatus::Panic
        }
    }
}

fn fail(e: Error) -> BpStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BpStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(BpStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        BpStatus::InvalidUtf8
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, BpStatus> {
    p.as_ref().ok_or_else(|| {
        set_error(format!("{what} is null"));
        BpStatus::NullPointer
    })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), BpStatus> {
    if out.is_null() {
        set_error("output pointer is null".into());
        return Err(BpStatus::NullPointer);
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The caller owns
/// the string and releases it with [`bp_string_free`].
#[no_mangle]
pub extern "C" fn bp_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn bp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version; a static string owned by the library.
#[no_mangle]
pub extern "C" fn bp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_config_default(out: *mut *mut BpConfig) -> BpStatus {
    guard(|| put(out, BpConfig(RunConfig::default())))
}

/// Parses a TOML run configuration; missing fields take their defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_config_from_toml(toml: *const c_char, out: *mut *mut BpConfig) -> BpStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let cfg = RunConfig::from_toml(text).map_err(fail)?;
        put(out, BpConfig(cfg))
    })
}

/// Hex config hash; release with [`bp_string_free`]. Null if `cfg` is null.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bp_config_hash(cfg: *const BpConfig) -> *mut c_char {
    match cfg.as_ref() {
        Some(c) => CString::new(c.0.hash()).expect("hex").into_raw(),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `cfg` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn bp_config_free(cfg: *mut BpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialized model.
///
/// # Safety
/// `cfg` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_model_new(cfg: *const BpConfig, seed: u64, out: *mut *mut BpModel) -> BpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let m = Model::new(&cfg.0, seed).map_err(fail)?;
        put(out, BpModel(m))
    })
}

/// # Safety
/// `cfg` must be a live handle, `path` a nul-terminated string and `out`
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_model_load(cfg: *const BpConfig, path: *const c_char, out: *mut *mut BpModel) -> BpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let path = str_arg(path, "path")?;
        let (m, _) = Model::load(Path::new(path), &cfg.0).map_err(fail)?;
        put(out, BpModel(m))
    })
}

/// # Safety
/// Handles must be live and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bp_model_save(
    model: *const BpModel,
    cfg: *const BpConfig,
    path: *const c_char,
    seed: u64,
) -> BpStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let cfg = ref_arg(cfg, "config")?;
        let path = str_arg(path, "path")?;
        model.0.save(Path::new(path), &cfg.0, "ffi", seed).map_err(fail)
    })
}

/// # Safety
/// `model` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn bp_model_free(model: *mut BpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generates a synthetic scenario of `kind` (`intersection`, `merge` or
/// `lane-follow`).
///
/// # Safety
/// `cfg` must be a live handle, `kind` a nul-terminated string and `out`
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_scenario_generate(
    cfg: *const BpConfig,
    kind: *const c_char,
    seed: u64,
    out: *mut *mut BpScenario,
) -> BpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let kind = ScenarioKind::parse(str_arg(kind, "kind")?).map_err(fail)?;
        let sc = generate_scenario(kind, seed, &generator_params(&cfg.0)).map_err(fail)?;
        put(out, BpScenario(sc))
    })
}

/// Loads and validates a scenario JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_scenario_load(path: *const c_char, out: *mut *mut BpScenario) -> BpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let sc = Scenario::load(Path::new(path)).map_err(fail)?;
        put(out, BpScenario(sc))
    })
}

/// # Safety
/// `scenario` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bp_scenario_save(scenario: *const BpScenario, path: *const c_char) -> BpStatus {
    guard(|| {
        let sc = ref_arg(scenario, "scenario")?;
        let path = str_arg(path, "path")?;
        sc.0.save(Path::new(path)).map_err(fail)
    })
}

/// Number of non-ego agents, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bp_scenario_agent_count(scenario: *const BpScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.agents.len())
}

/// # Safety
/// `scenario` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn bp_scenario_free(scenario: *mut BpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

fn nan_if_none(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Runs one closed-loop episode with the evaluation policy of `cfg`.
///
/// # Safety
/// Handles must be live and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bp_run_episode(
    cfg: *const BpConfig,
    model: *const BpModel,
    scenario: *const BpScenario,
    seed: u64,
    out: *mut BpEpisodeSummary,
) -> BpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let model = ref_arg(model, "model")?;
        let sc = ref_arg(scenario, "scenario")?;
        if out.is_null() {
            set_error("output pointer is null".into());
            return Err(BpStatus::NullPointer);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = run_episode(&cfg.0, &model.0, &sc.0, &PolicySettings::evaluation(&cfg.0), &mut rng).map_err(fail)?;
        let s = run.summary;
        *out = BpEpisodeSummary {
            success: s.success,
            reward: s.reward,
            task_time: s.task_time as u64,
            log_divergence: s.log_divergence,
            min_ade: nan_if_none(s.min_ade),
            consistency: nan_if_none(s.consistency),
            score_accuracy: nan_if_none(s.score_accuracy),
            decisions: s.decisions as u64,
        };
        Ok(())
    })
}

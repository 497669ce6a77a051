//! C ABI for `usra-core`.
//!
//! Objects cross the boundary as opaque pointers created by `*_new` or
//! `*_load` and released with the matching `*_free`. Every fallible call
//! returns a [`UsraStatus`]; on failure a message for the calling thread is
//! available from [`usra_last_error`]. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use usra_core::checkpoint::{Checkpoint, CheckpointError};
use usra_core::cli::parse_config;
use usra_core::envsim::{make_domain, ActionId, Observation, StriderWorld, Variant, NUM_ACTIONS, OBS_CHANNELS, OBS_LEN};
use usra_core::evalharness;
use usra_core::models::{ModelBundle, QInput};
use usra_core::numcore::Tensor;
use usra_core::trainer::TrainConfig;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsraStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Failed = 5,
    Panic = 6,
}

/// Trained or freshly initialized network bundle.
pub struct UsraModel(ModelBundle);

/// One environment instance with its own domain and frame stack.
pub struct UsraEnv(StriderWorld);

/// Resolved training configuration.
pub struct UsraConfig(TrainConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

type FfiResult<T> = Result<T, (UsraStatus, String)>;

fn fail<T>(status: UsraStatus, msg: impl std::fmt::Display) -> FfiResult<T> {
    Err((status, msg.to_string()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> UsraStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UsraStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            UsraStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(UsraStatus::NullArgument, format!("`{name}` is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(UsraStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .map_or_else(|| fail(UsraStatus::NullArgument, format!("`{name}` is null")), Ok)
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .map_or_else(|| fail(UsraStatus::NullArgument, format!("`{name}` is null")), Ok)
}

unsafe fn out_arg<T>(p: *mut T, value: T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        return fail(UsraStatus::NullArgument, format!("`{name}` is null"));
    }
    p.write(value);
    Ok(())
}

unsafe fn observation(data: *const f32, len: usize) -> FfiResult<Observation> {
    if data.is_null() {
        return fail(UsraStatus::NullArgument, "`obs` is null");
    }
    if len != OBS_LEN {
        return fail(UsraStatus::InvalidArgument, format!("observation needs {OBS_LEN} floats, got {len}"));
    }
    let values = std::slice::from_raw_parts(data, len).to_vec();
    let t = Tensor::new(&[OBS_CHANNELS, 48, 48], values).or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
    Observation::from_tensor(&t).or_else(|e| fail(UsraStatus::InvalidArgument, e))
}

fn variant(name: &str) -> FfiResult<Variant> {
    name.parse().or_else(|e| fail(UsraStatus::InvalidArgument, e))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn usra_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn usra_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of floats in one observation (`9 × 48 × 48`, channel-major).
#[no_mangle]
pub extern "C" fn usra_observation_len() -> usize {
    OBS_LEN
}

#[no_mangle]
pub extern "C" fn usra_num_actions() -> usize {
    NUM_ACTIONS
}

/// Fresh model. `general_mean_head` selects the Q-head that reads only the
/// domain-general mean instead of the full latent.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn usra_model_new(seed: u64, general_mean_head: bool, out: *mut *mut UsraModel) -> UsraStatus {
    guard(|| {
        let q = if general_mean_head {
            QInput::GeneralMean
        } else {
            QInput::Latent
        };
        let m = Box::into_raw(Box::new(UsraModel(ModelBundle::new(seed, q))));
        out_arg(out, m, "out").inspect_err(|_| drop(Box::from_raw(m)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn usra_model_load(path: *const c_char, out: *mut *mut UsraModel) -> UsraStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return fail(UsraStatus::NullArgument, "`out` is null");
        }
        let ck = Checkpoint::load(Path::new(path)).or_else(|e| match e {
            CheckpointError::Io { .. } => fail(UsraStatus::Io, &e),
            other => fail(UsraStatus::Corrupt, other),
        })?;
        let (bundle, _) = ModelBundle::from_checkpoint(&ck).or_else(|e| fail(UsraStatus::Corrupt, e))?;
        out.write(Box::into_raw(Box::new(UsraModel(bundle))));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn usra_model_save(model: *const UsraModel, path: *const c_char) -> UsraStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        m.0.to_checkpoint(&[])
            .save(Path::new(path))
            .or_else(|e| fail(UsraStatus::Io, e))
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn usra_model_free(model: *mut UsraModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Q-values of one observation into `out[0..5]`.
///
/// # Safety
/// `obs` must hold `obs_len` floats and `out` room for `usra_num_actions()` floats.
#[no_mangle]
pub unsafe extern "C" fn usra_model_q_values(
    model: *const UsraModel,
    obs: *const f32,
    obs_len: usize,
    out: *mut f32,
) -> UsraStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let o = observation(obs, obs_len)?;
        if out.is_null() {
            return fail(UsraStatus::NullArgument, "`out` is null");
        }
        let q = m.0.q_of(&o).or_else(|e| fail(UsraStatus::Failed, e))?;
        ptr::copy_nonoverlapping(q.data().as_ptr(), out, NUM_ACTIONS);
        Ok(())
    })
}

/// Greedy action index for one observation.
///
/// # Safety
/// `obs` must hold `obs_len` floats and `action` be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn usra_model_act(
    model: *const UsraModel,
    obs: *const f32,
    obs_len: usize,
    action: *mut u32,
) -> UsraStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let o = observation(obs, obs_len)?;
        let a = m.0.greedy_action(&o).or_else(|e| fail(UsraStatus::Failed, e))?;
        out_arg(action, a.index() as u32, "action")
    })
}

/// Mean greedy return over `episodes` episodes of the named domain.
///
/// # Safety
/// `domain` must be NUL-terminated and `mean` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn usra_model_evaluate(
    model: *const UsraModel,
    domain: *const c_char,
    episodes: usize,
    seed: u64,
    mean: *mut f64,
) -> UsraStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let v = variant(str_arg(domain, "domain")?)?;
        let r = evalharness::evaluate(&m.0, v, episodes, seed).or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
        out_arg(mean, r, "mean")
    })
}

/// Environment for a domain variant (`train`, `color_easy`, `color_hard`,
/// `video_easy`, `video_hard`). `domain_seed` draws the visual parameters,
/// `reset_seed` the initial state.
///
/// # Safety
/// `domain` must be NUL-terminated and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn usra_env_new(
    domain: *const c_char,
    domain_seed: u64,
    reset_seed: u64,
    out: *mut *mut UsraEnv,
) -> UsraStatus {
    guard(|| {
        let v = variant(str_arg(domain, "domain")?)?;
        let e = Box::into_raw(Box::new(UsraEnv(StriderWorld::new(make_domain(v, domain_seed), reset_seed))));
        out_arg(out, e, "out").inspect_err(|_| drop(Box::from_raw(e)))
    })
}

/// # Safety
/// `env` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn usra_env_reset(env: *mut UsraEnv, seed: u64) -> UsraStatus {
    guard(|| {
        mut_arg(env, "env")?.0.reset(seed);
        Ok(())
    })
}

/// Applies `action` (0..5). Stepping a finished episode is an error.
///
/// # Safety
/// `env` must come from this library; `reward` and `done` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn usra_env_step(env: *mut UsraEnv, action: u32, reward: *mut f32, done: *mut bool) -> UsraStatus {
    guard(|| {
        let e = mut_arg(env, "env")?;
        if reward.is_null() || done.is_null() {
            return fail(UsraStatus::NullArgument, "`reward` or `done` is null");
        }
        let a = ActionId::new(action as usize)
            .map_or_else(|| fail(UsraStatus::InvalidArgument, format!("action {action} out of range")), Ok)?;
        let s = e.0.step(a).or_else(|err| fail(UsraStatus::InvalidArgument, err))?;
        reward.write(s.reward);
        done.write(s.done);
        Ok(())
    })
}

/// Copies the current observation into `out` (`usra_observation_len()` floats).
///
/// # Safety
/// `out` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn usra_env_observation(env: *const UsraEnv, out: *mut f32, len: usize) -> UsraStatus {
    guard(|| {
        let e = ref_arg(env, "env")?;
        if out.is_null() {
            return fail(UsraStatus::NullArgument, "`out` is null");
        }
        if len != OBS_LEN {
            return fail(UsraStatus::InvalidArgument, format!("buffer needs {OBS_LEN} floats, got {len}"));
        }
        e.0.observation().write_into(std::slice::from_raw_parts_mut(out, len));
        Ok(())
    })
}

/// # Safety
/// `env` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn usra_env_free(env: *mut UsraEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Parses config text (`key = value` lines, `#` comments).
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn usra_config_parse(text: *const c_char, out: *mut *mut UsraConfig) -> UsraStatus {
    guard(|| {
        let cfg = parse_config(str_arg(text, "text")?).or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
        let c = Box::into_raw(Box::new(UsraConfig(cfg)));
        out_arg(out, c, "out").inspect_err(|_| drop(Box::from_raw(c)))
    })
}

/// Sets one key; the whole config is re-validated.
///
/// # Safety
/// `config` must come from this library; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn usra_config_set(config: *mut UsraConfig, key: *const c_char, value: *const c_char) -> UsraStatus {
    guard(|| {
        let c = mut_arg(config, "config")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = c.0.clone();
        next.set(key, value).or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
        next.validate().or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
        c.0 = next;
        Ok(())
    })
}

/// Seed of a parsed config.
///
/// # Safety
/// `config` must come from this library and `seed` be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn usra_config_seed(config: *const UsraConfig, seed: *mut u64) -> UsraStatus {
    guard(|| {
        let c = ref_arg(config, "config")?;
        out_arg(seed, c.0.seed, "seed")
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn usra_config_free(config: *mut UsraConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// `100 (a - b) / b` rounded to one decimal; `b == 0` is an invalid argument.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn usra_relative_improvement(a: f64, b: f64, out: *mut f64) -> UsraStatus {
    guard(|| {
        let r = evalharness::relative_improvement(a, b).or_else(|e| fail(UsraStatus::InvalidArgument, e))?;
        out_arg(out, r, "out")
    })
}

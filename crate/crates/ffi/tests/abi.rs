use std::ffi::{CStr, CString};
use std::ptr;

use usra_ffi::*;

fn last_error() -> String {
    let p = usra_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn episode_through_handles() {
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(usra_env_new(c("train").as_ptr(), 1, 2, &mut env), UsraStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(usra_model_new(3, false, &mut model), UsraStatus::Ok);

        let mut obs = vec![0.0f32; usra_observation_len()];
        let (mut total, mut steps) = (0.0f64, 0);
        loop {
            assert_eq!(usra_env_observation(env, obs.as_mut_ptr(), obs.len()), UsraStatus::Ok);
            let mut a = 99u32;
            assert_eq!(usra_model_act(model, obs.as_ptr(), obs.len(), &mut a), UsraStatus::Ok);
            assert!((a as usize) < usra_num_actions());
            let (mut r, mut done) = (0.0f32, false);
            assert_eq!(usra_env_step(env, a, &mut r, &mut done), UsraStatus::Ok);
            total += r as f64;
            steps += 1;
            if done {
                break;
            }
        }
        assert_eq!(steps, 200);
        assert!(total.abs() <= 200.0);

        let (mut r, mut done) = (0.0f32, false);
        assert_eq!(usra_env_step(env, 0, &mut r, &mut done), UsraStatus::InvalidArgument);
        assert!(last_error().contains("reset"));
        assert_eq!(usra_env_reset(env, 5), UsraStatus::Ok);
        assert_eq!(usra_env_step(env, 7, &mut r, &mut done), UsraStatus::InvalidArgument);

        usra_env_free(env);
        usra_model_free(model);
    }
}

#[test]
fn model_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.ckpt").to_str().unwrap());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(usra_model_new(8, true, &mut model), UsraStatus::Ok);
        assert_eq!(usra_model_save(model, path.as_ptr()), UsraStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(usra_model_load(path.as_ptr(), &mut back), UsraStatus::Ok);

        let obs = vec![0.25f32; usra_observation_len()];
        let (mut q1, mut q2) = ([0.0f32; 5], [0.0f32; 5]);
        assert_eq!(usra_model_q_values(model, obs.as_ptr(), obs.len(), q1.as_mut_ptr()), UsraStatus::Ok);
        assert_eq!(usra_model_q_values(back, obs.as_ptr(), obs.len(), q2.as_mut_ptr()), UsraStatus::Ok);
        assert_eq!(q1, q2);

        let mut m1 = 0.0;
        assert_eq!(usra_model_evaluate(back, c("color_hard").as_ptr(), 1, 4, &mut m1), UsraStatus::Ok);
        assert!(m1.abs() <= 200.0);
        assert_eq!(usra_model_evaluate(back, c("snow").as_ptr(), 1, 4, &mut m1), UsraStatus::InvalidArgument);

        usra_model_free(model);
        usra_model_free(back);
    }
}

#[test]
fn corrupt_and_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"USRA1 not really").unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(usra_model_load(c(bad.to_str().unwrap()).as_ptr(), &mut m), UsraStatus::Corrupt);
        assert!(m.is_null());
        let missing = dir.path().join("none.ckpt");
        assert_eq!(usra_model_load(c(missing.to_str().unwrap()).as_ptr(), &mut m), UsraStatus::Io);
        assert_eq!(usra_model_load(ptr::null(), &mut m), UsraStatus::NullArgument);
    }
}

#[test]
fn config_parse_and_set() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(usra_config_parse(c("seed = 9\nmethod = svea\n").as_ptr(), &mut cfg), UsraStatus::Ok);
        let mut seed = 0;
        assert_eq!(usra_config_seed(cfg, &mut seed), UsraStatus::Ok);
        assert_eq!(seed, 9);
        assert_eq!(usra_config_set(cfg, c("gamma").as_ptr(), c("1.5").as_ptr()), UsraStatus::InvalidArgument);
        assert!(last_error().contains("gamma"));
        assert_eq!(usra_config_set(cfg, c("seed").as_ptr(), c("4").as_ptr()), UsraStatus::Ok);
        usra_config_seed(cfg, &mut seed);
        assert_eq!(seed, 4);
        usra_config_free(cfg);

        let mut other = ptr::null_mut();
        assert_eq!(usra_config_parse(c("x = 1\n").as_ptr(), &mut other), UsraStatus::InvalidArgument);
        assert!(last_error().contains("line 1"));
    }
}

#[test]
fn improvement_and_errors() {
    unsafe {
        let mut r = 0.0;
        assert_eq!(usra_relative_improvement(862.0, 703.0, &mut r), UsraStatus::Ok);
        assert_eq!(r, 22.6);
        assert!(usra_last_error().is_null());
        assert_eq!(usra_relative_improvement(1.0, 0.0, &mut r), UsraStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(usra_relative_improvement(1.0, 2.0, ptr::null_mut()), UsraStatus::NullArgument);
        let obs = [0.0f32; 3];
        let mut a = 0;
        let mut model = ptr::null_mut();
        usra_model_new(1, false, &mut model);
        assert_eq!(usra_model_act(model, obs.as_ptr(), 3, &mut a), UsraStatus::InvalidArgument);
        usra_model_free(model);
        usra_model_free(ptr::null_mut());
        assert!(!CStr::from_ptr(usra_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_declares_the_surface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/usra.h")).unwrap();
    for name in [
        "usra_model_new",
        "usra_model_load",
        "usra_model_act",
        "usra_env_step",
        "usra_config_parse",
        "usra_last_error",
        "USRA_STATUS_CORRUPT",
        "typedef struct UsraModel UsraModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/usra.h");
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-x", "c", header]).output() else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

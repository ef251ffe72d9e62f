use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use laenet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(laenet_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn solve_default_scenario_through_handles() {
    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(laenet_scenario_default(&mut sc), LaenetStatus::Ok);
        let mut n = 0usize;
        assert_eq!(laenet_scenario_num_users(sc, &mut n), LaenetStatus::Ok);
        assert_eq!(n, 4);

        let mut sol = ptr::null_mut();
        assert_eq!(laenet_arpo_solve(sc, 0.0, ptr::null(), &mut sol), LaenetStatus::Ok);
        let native = laenet::arpo::solve_scenario(&laenet::scenario::Scenario {
            zeta: 0.0,
            ..laenet::default_scenario()
        })
        .unwrap();
        for i in 0..n {
            let (mut p, mut r) = (0.0, 0u64);
            assert_eq!(laenet_solution_power(sol, i, &mut p), LaenetStatus::Ok);
            assert_eq!(laenet_solution_resolution(sol, i, &mut r), LaenetStatus::Ok);
            assert_eq!(p, native.power_per_user[i]);
            assert_eq!(r, native.res_per_user[i].pixels());
        }
        let mut p = 0.0;
        assert_eq!(laenet_solution_power(sol, n, &mut p), LaenetStatus::OutOfRange);
        assert!(last_error().contains("out of range"));

        let (mut lat, mut tot, mut obj) = (0.0, 0.0, 0.0);
        assert_eq!(laenet_solution_max_latency(sol, &mut lat), LaenetStatus::Ok);
        assert_eq!(laenet_solution_total_power(sol, &mut tot), LaenetStatus::Ok);
        assert_eq!(laenet_solution_objective(sol, &mut obj), LaenetStatus::Ok);
        assert_eq!(lat, native.max_latency());
        assert_eq!(last_error(), "");

        let mut env = ptr::null_mut();
        assert_eq!(laenet_env_new(sc, sol, 7, &mut env), LaenetStatus::Ok);
        let mut pose = [0.0; 3];
        assert_eq!(laenet_env_pose(env, pose.as_mut_ptr()), LaenetStatus::Ok);
        assert_eq!(pose, [-500.0, -500.0, 150.0]);
        let mut done = false;
        let mut steps = 0;
        while !done {
            let mut r = 0.0;
            assert_eq!(laenet_env_step(env, 60.0, 70.0, -20.0, &mut r, &mut done), LaenetStatus::Ok);
            assert!(r.is_finite());
            steps += 1;
        }
        assert!(steps <= 50);
        assert_eq!(laenet_env_step(env, 0.0, 0.0, 0.0, ptr::null_mut(), ptr::null_mut()), LaenetStatus::EpisodeFinished);
        let mut l = 0.0;
        assert_eq!(laenet_env_max_latency(env, &mut l), LaenetStatus::Ok);
        assert!(l > 0.0);

        laenet_env_free(env);
        laenet_solution_free(sol);
        laenet_scenario_free(sc);
    }
}

#[test]
fn channel_chain_matches_worked_numbers() {
    let (mut r, mut t) = (0.0, 0.0);
    unsafe {
        assert_eq!(laenet_rate_bps(0.1, 1e-9, 1e-13, 1e6, &mut r), LaenetStatus::Ok);
        assert_eq!(laenet_static_uplink_time(0.42 * 8e6, 1e6, 0.1, 1e-9, 1e-13, &mut t), LaenetStatus::Ok);
        assert_eq!(laenet_rate_bps(0.1, 1e-9, 0.0, 1e6, &mut r), LaenetStatus::InvalidArgument);
    }
    assert!((r - 9.9672e6).abs() / 9.9672e6 < 1e-4);
    assert!((t - 0.33711).abs() / 0.33711 < 1e-4);
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        assert_eq!(laenet_scenario_default(ptr::null_mut()), LaenetStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut sc = ptr::null_mut();
        let bad = CString::new("zeta = \"x\"").unwrap();
        assert_eq!(laenet_scenario_from_toml(bad.as_ptr(), &mut sc), LaenetStatus::Parse);
        assert!(sc.is_null());
        assert!(!last_error().is_empty());
        let mut sol = ptr::null_mut();
        assert_eq!(laenet_arpo_solve(ptr::null(), 0.0, ptr::null(), &mut sol), LaenetStatus::NullPointer);
        laenet_scenario_free(ptr::null_mut());
        laenet_solution_free(ptr::null_mut());
        laenet_env_free(ptr::null_mut());
    }
}

#[test]
fn toml_round_trip_and_infeasible_status() {
    let mut s = laenet::default_scenario();
    s.users[0].acc_min = 0.99;
    let text = CString::new(s.to_toml()).unwrap();
    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(laenet_scenario_from_toml(text.as_ptr(), &mut sc), LaenetStatus::Ok);
        let mut sol = ptr::null_mut();
        let pose = [0.0, 0.0, 100.0];
        assert_eq!(laenet_arpo_solve(sc, 100.0, pose.as_ptr(), &mut sol), LaenetStatus::Infeasible);
        assert!(last_error().contains("user 0"));
        laenet_scenario_free(sc);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(laenet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/laenet.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    for t in ["LaenetScenario", "LaenetSolution", "LaenetEnv", "LAENET_STATUS_OK"] {
        assert!(h.contains(t));
    }
}

/// Compile and run a small C program against the static library.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not found; skipping C link check");
        return;
    }
    // target/<profile>/deps/abi-xxxx -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("liblaenet_ffi.a");
    if !lib.exists() {
        // `cargo test` only builds the rlib; ask for the archive explicitly.
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "-p", "laenet-ffi", "--lib"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        let st = cmd.status().unwrap();
        assert!(st.success());
    }
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("main.c");
    std::fs::write(
        &c,
        r#"#include <stdio.h>
#include "laenet.h"
int main(void) {
    LaenetScenario *sc = NULL;
    LaenetSolution *sol = NULL;
    double lat = 0.0;
    if (laenet_scenario_default(&sc) != LAENET_STATUS_OK) return 1;
    if (laenet_arpo_solve(sc, -1.0, NULL, &sol) != LAENET_STATUS_OK) return 2;
    if (laenet_solution_max_latency(sol, &lat) != LAENET_STATUS_OK) return 3;
    if (laenet_solution_power(sol, 99, &lat) != LAENET_STATUS_OUT_OF_RANGE) return 4;
    printf("%s\n", laenet_last_error());
    laenet_solution_free(sol);
    laenet_scenario_free(sc);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&c)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).contains("out of range"));
}

//! Exit codes and artifacts of the `fdck` binary.

use std::path::Path;
use std::process::Command;

fn fdck(args: &[&str], cache: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fdck")).args(args).env("FDCK_CACHE_DIR", cache).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn config_errors_exit_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let out = tmp.path().join("out");
    for (name, text) in [
        ("unknown.toml", "scenario = \"no-such-scenario\""),
        ("badkey.toml", "scenario = \"runge\"\ncolour = 3"),
        ("badtol.toml", "scenario = \"runge\"\n[tolerances]\nidentity_fixed = 0.0"),
        ("badset.toml", "scenario = \"runge\"\n[basis]\ninput_set = \"W7\""),
    ] {
        let cfg = write(tmp.path(), name, text);
        let o = fdck(&["run", &cfg, "--output-dir", out.to_str().unwrap()], &cache);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{name} produced outputs");
        assert_eq!(fdck(&["validate", &cfg], &cache).status.code(), Some(2));
    }
    let o = fdck(&["run", tmp.path().join("missing.toml").to_str().unwrap()], &cache);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_validate_and_cache_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let cfg = write(tmp.path(), "ok.toml", "scenario = \"integral-identity\"\n[identity]\nlevels = 2\n");
    let o = fdck(&["validate", &cfg], &cache);
    assert_eq!(o.status.code(), Some(0));

    let out = tmp.path().join("out");
    let o = fdck(&["--seed", "5", "run", &cfg, "--output-dir", out.to_str().unwrap()], &cache);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["all_pass"], true);
    assert!(out.join("integral_identity.csv").exists());
    let n_cached = std::fs::read_dir(&cache).unwrap().count();
    assert!(n_cached > 0);

    let o = fdck(&["cache", "clean"], &cache);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 0);
}

#[test]
fn failed_assertion_exits_1_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    // demands an exact in-range fit below double precision
    let cfg = write(tmp.path(), "strict.toml", "scenario = \"runge\"\n[tolerances]\nrunge_in_range = 1e-300\n");
    let out = tmp.path().join("out");
    let o = fdck(&["run", &cfg, "--output-dir", out.to_str().unwrap(), "--jobs", "2"], &cache);
    assert_eq!(o.status.code(), Some(1));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["all_pass"], false);
    let names: Vec<&str> = m["assertions"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["runge_zero", "runge_in_range", "runge_decreasing"]);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let o = fdck(&["validate", p.to_str().unwrap()], tmp.path());
            assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert_eq!(n, 8);
}

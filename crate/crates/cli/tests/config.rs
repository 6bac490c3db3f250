use std::path::Path;
use std::process::Command;

use gibr::config::RawConfig;

fn gibr(args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gibr"));
    cmd.args(args).env_remove("GIBR_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

#[test]
fn defaults_resolve() {
    let cfg = RawConfig::default().resolve().unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!((cfg.data.width, cfg.data.height, cfg.data.views), (32, 32, 6));
    assert_eq!(cfg.model.encoder.mults, vec![1, 2, 4]);
    assert_eq!(cfg.train.cfg.ray_fraction, 0.12);
    assert_eq!(cfg.noise_schedule().unwrap().steps, 1000);
}

#[test]
fn printed_config_parses_back() {
    let mut raw = RawConfig::default();
    raw.assign("model.base=16").unwrap();
    raw.assign("train.lr = 3e-4").unwrap();
    let text = raw.to_text();
    let back = RawConfig::parse(&text, Path::new("x.ini")).unwrap();
    assert_eq!(back, raw);
    assert_eq!(back.hash(), raw.hash());
}

#[test]
fn unknown_settings_are_rejected_with_location() {
    let err = RawConfig::parse("seed = 1\n[model]\nbse = 3\n", Path::new("c.ini")).unwrap_err();
    assert_eq!(err.to_string(), "c.ini:3: unknown setting `model.bse`");
    let err = RawConfig::parse("[modle]\n", Path::new("c.ini")).unwrap_err();
    assert!(err.to_string().starts_with("c.ini:1: unknown section"), "{err}");
    assert!(RawConfig::default().assign("train.nope=1").is_err());
    assert!(RawConfig::default().assign("seed").is_err());
}

#[test]
fn bad_values_fail_at_resolve() {
    let mut raw = RawConfig::default();
    raw.set("precision", "f16").unwrap();
    assert!(raw.resolve().is_err());
    let mut raw = RawConfig::default();
    raw.set("model.dropout", "maybe").unwrap();
    assert!(raw.resolve().is_err());
}

#[test]
fn hash_ignores_paths_only() {
    let base = RawConfig::default();
    let mut moved = base.clone();
    moved.set("data.dir", "elsewhere").unwrap();
    moved.set("train.out", "run2").unwrap();
    moved.set("threads", "3").unwrap();
    assert_eq!(base.hash(), moved.hash());
    let mut reseeded = base.clone();
    reseeded.set("seed", "1").unwrap();
    assert_ne!(base.hash(), reseeded.hash());
}

#[test]
fn seed_from_environment_wins() {
    let out = gibr(&["--set", "seed=3", "config"], &[("GIBR_SEED", "5")]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "seed = 5"), "{text}");

    let out = gibr(&["config"], &[("GIBR_SEED", "x")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = gibr(&["sample", "--ckpt", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");

    let out = gibr(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = gibr(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = r#"{
    "name": "tiny",
    "seed": 5,
    "dataset": {
        "system": { "kind": "single_pendulum" },
        "mode": "embed",
        "videos": 20, "frames": 20, "embed_dim": 6, "embed_hidden": 8,
        "splits": [0.5, 0.2, 0.3]
    },
    "stage1": { "epochs": 2, "hidden": [16], "dynamics_width": 8, "batch_windows": 4 },
    "stage2": { "epochs": 2, "hidden": [16], "dynamics_width": 8, "batch_windows": 4 },
    "id": { "k": 5, "d_max": 4, "max_points": 150 },
    "symreg": { "islands": 2, "population": 30, "generations": 5 }
}"#;

fn tide(args: &[&str], cache: &Path) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_tide"))
        .args(args)
        .env("TIDE_CACHE_DIR", cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    (out.status.success(), serde_json::from_str(&text).unwrap_or_else(|_| panic!("not JSON: {text}")))
}

fn setup() -> (tempfile::TempDir, String, String, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let cache = dir.path().join("cache");
    (dir, cfg.to_string_lossy().into_owned(), out.to_string_lossy().into_owned(), cache)
}

#[test]
fn gen_is_idempotent() {
    let (_dir, cfg, out, cache) = setup();
    let (ok, first) = tide(&["gen", "--config", &cfg, "--out", &out], &cache);
    assert!(ok);
    assert_eq!(first["cached"], false);
    assert_eq!(first["pairs"], 20 * 19);
    let (ok, second) = tide(&["gen", "--config", &cfg, "--out", &out], &cache);
    assert!(ok);
    assert_eq!(second["cached"], true);
    assert_eq!(second["new_files"], 0);
}

#[test]
fn subcommands_emit_their_contracts() {
    let (_dir, cfg, out, cache) = setup();
    let (ok, id) = tide(&["estimate-id", "--config", &cfg, "--out", &out], &cache);
    assert!(ok, "{id}");
    assert!(id["id_fractional"].as_f64().unwrap() > 0.0);
    assert!(id["id_rounded"].as_u64().unwrap() >= 1);
    assert_eq!(id["kl_curve"].as_array().unwrap().len(), 4);

    let (ok, m) = tide(&["metrics", "--config", &cfg, "--out", &out, "--split", "test"], &cache);
    assert!(ok, "{m}");
    for key in ["smoothness", "mi", "amse"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }

    let (ok, r) = tide(&["report", "--config", &cfg, "--out", &out], &cache);
    assert!(ok, "{r}");
    let metrics = std::fs::read(Path::new(&out).join("metrics.json")).unwrap();
    std::fs::remove_file(Path::new(&out).join("metrics.json")).unwrap();
    let (ok, again) = tide(&["report", "--config", &cfg, "--out", &out], &cache);
    assert!(ok);
    assert_eq!(again["cached_steps"].as_array().unwrap().len(), 7);
    assert_eq!(std::fs::read(Path::new(&out).join("metrics.json")).unwrap(), metrics);

    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/metrics.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let doc: Value = serde_json::from_slice(&metrics).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "metrics.json violates its schema: {errors:?}");

    let other = Path::new(&out).join("metrics.json").to_string_lossy().into_owned();
    let (ok, cmp) = tide(&["report", "--config", &cfg, "--out", &out, "--compare", &other], &cache);
    assert!(ok);
    assert_eq!(cmp["comparison"]["smoothness_ratio"], 1.0);
}

#[test]
fn errors_are_single_line_json() {
    let (_dir, _cfg, out, cache) = setup();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, TINY.replace("\"splits\": [0.5, 0.2, 0.3]", "\"splits\": [0.5, 0.2, 0.2]")).unwrap();
    let raw = Command::new(env!("CARGO_BIN_EXE_tide"))
        .args(["gen", "--config", bad.to_str().unwrap(), "--out", &out])
        .env("TIDE_CACHE_DIR", &cache)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!raw.status.success());
    let text = String::from_utf8(raw.stdout).unwrap();
    assert_eq!(text.trim().lines().count(), 1);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["error"], "ConfigError");
}

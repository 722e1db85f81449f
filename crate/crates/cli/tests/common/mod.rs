#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Copies the demo fixture into a fresh temporary directory and returns it
/// with the path of its config.
pub fn demo_workspace() -> (tempfile::TempDir, PathBuf) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo");
    let dir = tempfile::tempdir().unwrap();
    for name in ["corpus.jsonl", "labels.jsonl", "training.jsonl", "script.json", "config.json"] {
        std::fs::copy(src.join(name), dir.path().join(name)).unwrap();
    }
    let config = dir.path().join("config.json");
    (dir, config)
}

/// Rewrites the config JSON in place.
pub fn edit_config(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

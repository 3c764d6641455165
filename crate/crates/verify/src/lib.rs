//! Dataset lookup and pinned run settings shared by the acceptance checks.
//!
//! Datasets are read from `$ASGAT_DATA_DIR` (default: `data/` at the
//! workspace root) as `<name>.tsv` in the canonical format. Fixed splits are
//! taken from `<name>_splits/<i>.txt` when present, otherwise generated with
//! seed `i`. An optional `<name>.conf` overrides the pinned hyperparameters.

use std::path::{Path, PathBuf};

use asgat::config::KeyValues;
use asgat::graph::{load_graph, split_per_class};
use asgat::model::Backend;
use asgat::train::TrainConfig;
use asgat::{Graph, Result, Split};

pub fn data_dir() -> PathBuf {
    match std::env::var_os("ASGAT_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR"))
            .ancestors()
            .nth(2)
            .expect("package sits two levels below the workspace root")
            .join("data"),
    }
}

/// Loads `<data_dir>/<name>.tsv`; the error text names the missing path.
pub fn dataset(name: &str) -> std::result::Result<Graph, String> {
    let path = data_dir().join(format!("{name}.tsv"));
    if !path.exists() {
        return Err(format!("dataset file {} not found", path.display()));
    }
    load_graph(&path).map_err(|e| format!("{}: {e}", path.display()))
}

/// `count` splits: files from `<name>_splits/` if that directory exists,
/// else per-class 60/20/20 splits with seeds `0..count`.
pub fn splits(name: &str, g: &Graph, count: usize) -> Result<Vec<Split>> {
    let dir = data_dir().join(format!("{name}_splits"));
    (0..count)
        .map(|i| {
            if dir.is_dir() {
                let path = dir.join(format!("{i}.txt"));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| asgat::Error::Validation(format!("{}: {e}", path.display())))?;
                let mut s = Split::parse(&text, g.num_nodes())?;
                s.seed = i as u64;
                Ok(s)
            } else {
                split_per_class(g, i as u64).map_err(|e| match e {
                    asgat::Error::SmallClass { .. } => {
                        asgat::Error::Validation(format!("{e}; provide fixed split files in {}", dir.display()))
                    }
                    e => e,
                })
            }
        })
        .collect()
}

/// Settings used for every dataset run unless `<name>.conf` overrides them.
pub fn pinned_config(name: &str, backend: Backend) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        backend,
        ..TrainConfig::default()
    };
    let path = data_dir().join(format!("{name}.conf"));
    if path.exists() {
        let kv = KeyValues::load(&path)?;
        cfg.apply(&kv)?;
        // The backend under test is fixed by the caller.
        if kv.get("backend").is_some() {
            cfg.backend = backend;
        }
    }
    Ok(cfg)
}

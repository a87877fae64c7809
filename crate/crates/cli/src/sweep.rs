//! Grid expansion for `nodelearn sweep`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use nodelearn::config::ScenarioConfig;
use nodelearn::Error;

use crate::{check, invalid, runtime, Failure};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Dotted config path to candidate values. Keys are expanded in sorted
    /// order, so cell order and directory names do not depend on the file.
    #[serde(default)]
    pub grid: std::collections::BTreeMap<String, Vec<Value>>,
    /// Empty means the config's own seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub config: ScenarioConfig,
    /// `path=value/.../seed=k`
    pub rel_dir: PathBuf,
    pub seed_overridden: bool,
}

pub fn load_grid(path: &Path) -> Result<GridSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn slot<'a>(root: &'a mut Value, dotted: &str) -> Option<&'a mut Value> {
    dotted.split('.').try_fold(root, |v, key| match v {
        Value::Object(m) => m.get_mut(key),
        Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    })
}

fn label(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    s.chars()
        .map(|c| if c.is_alphanumeric() || "-_.+".contains(c) { c } else { '_' })
        .collect()
}

/// Cartesian product of the grid times the seed list. Every cell is
/// validated before anything runs.
pub fn expand(base: &ScenarioConfig, spec: &GridSpec) -> Result<Vec<Cell>, Failure> {
    let base_value = serde_json::to_value(base).map_err(runtime)?;
    for key in spec.grid.keys() {
        let mut probe = base_value.clone();
        if slot(&mut probe, key).is_none() {
            return Err(Failure::Invalid(format!("grid field `{key}` does not exist in the config")));
        }
    }
    let mut combos: Vec<(Value, PathBuf)> = vec![(base_value, PathBuf::new())];
    for (key, values) in &spec.grid {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for (v, dir) in &combos {
            for val in values {
                let mut v = v.clone();
                *slot(&mut v, key).expect("checked above") = val.clone();
                next.push((v, dir.join(format!("{key}={}", label(val)))));
            }
        }
        combos = next;
    }
    let seeds: Vec<(u64, bool)> = if spec.seeds.is_empty() {
        vec![(base.seed, false)]
    } else {
        spec.seeds.iter().map(|&s| (s, true)).collect()
    };
    let mut cells = Vec::new();
    for (v, dir) in combos {
        let mut config: ScenarioConfig =
            serde_json::from_value(v).map_err(|e| Failure::Invalid(format!("{}: {e}", dir.display())))?;
        for &(seed, overridden) in &seeds {
            config.seed = seed;
            let rel_dir = dir.join(format!("seed={seed}"));
            check(&config).map_err(|f| Failure::Invalid(format!("{}: {}", rel_dir.display(), f.message())))?;
            cells.push(Cell {
                config: config.clone(),
                rel_dir,
                seed_overridden: overridden,
            });
        }
    }
    Ok(cells)
}

/// Record each cell's outcome in `sweep.json`; returns the failure count.
pub fn write_summary(root: &Path, results: &[(PathBuf, Result<(), Failure>)]) -> Result<usize, Failure> {
    let rows: Vec<Value> = results
        .iter()
        .map(|(dir, r)| {
            let mut row = serde_json::json!({ "dir": dir, "status": if r.is_ok() { "ok" } else { "failed" } });
            if let Err(f) = r {
                row["error"] = Value::String(f.message().to_string());
            }
            row
        })
        .collect();
    let path = root.join("sweep.json");
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "cells": rows })).map_err(runtime)?;
    text.push('\n');
    std::fs::create_dir_all(root).map_err(|e| runtime(Error::io(root, e)))?;
    std::fs::write(&path, text).map_err(|e| runtime(Error::io(&path, e)))?;
    Ok(results.iter().filter(|(_, r)| r.is_err()).count())
}

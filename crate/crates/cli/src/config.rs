//! Flat, commented key/value run-config files. One `dotted.path = value` per
//! line, `#` starts a comment, values are JSON scalars (bare words read as
//! strings). Every key must exist in the default config — unknown keys and
//! type mismatches are errors, so a config file can never silently drift
//! from the schema.

use crate::CliError;
use lethe_core::engine::RunConfig;
use serde_json::Value;

/// Parse the flat text into a JSON overlay tree without touching defaults.
pub fn parse_overlay(text: &str) -> Result<Value, CliError> {
    let mut root = Value::Object(Default::default());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        set_path(&mut root, key.trim(), parse_scalar(val.trim()))
            .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
    }
    Ok(root)
}

/// Bare words become strings; everything JSON understands stays itself.
fn parse_scalar(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn set_path(root: &mut Value, path: &str, val: Value) -> Result<(), String> {
    if path.is_empty() {
        return Err("empty key".into());
    }
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| format!("`{part}` is not a table"))?
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| format!("`{path}` overwrites a nested table"))?
        .insert(parts.last().unwrap().to_string(), val);
    Ok(())
}

/// Deep-merge `overlay` onto `base`, refusing keys absent from `base` and
/// scalar/table mismatches. `base` is the serialized default config, so this
/// is the schema check.
fn merge_checked(base: &mut Value, overlay: Value, at: &str) -> Result<(), CliError> {
    let Value::Object(over) = overlay else {
        *base = overlay;
        return Ok(());
    };
    let Some(tbl) = base.as_object_mut() else {
        return Err(CliError::Config(format!("`{at}` does not take nested keys")));
    };
    for (k, v) in over {
        let full = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match tbl.get_mut(&k) {
            Some(slot) => merge_checked(slot, v, &full)?,
            None => return Err(CliError::Config(format!("unknown config key `{full}`"))),
        }
    }
    Ok(())
}

/// Resolve a run config: defaults, then the optional config file, then
/// `--set key=value` overrides, in that order.
pub fn load_run_config(
    file_text: Option<&str>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut base = serde_json::to_value(RunConfig::default())
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(text) = file_text {
        merge_checked(&mut base, parse_overlay(text)?, "")?;
    }
    for pair in sets {
        let (key, val) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set needs key=value, got `{pair}`")))?;
        let mut overlay = Value::Object(Default::default());
        set_path(&mut overlay, key.trim(), parse_scalar(val.trim()))
            .map_err(CliError::Config)?;
        merge_checked(&mut base, overlay, "")?;
    }
    serde_json::from_value(base).map_err(|e| CliError::Config(format!("schema violation: {e}")))
}

/// Render a config as the flat format, one key per line in a stable order,
/// with section comments. `render_default_config` round-trips to
/// `RunConfig::default()` by construction.
pub fn render_flat(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut out = String::from(
        "# lethe run config — flat key = value, `#` comments.\n\
         # Every key below is required to exist; values are JSON scalars.\n",
    );
    let section = |out: &mut String, name: &str| {
        out.push('\n');
        out.push_str("# ");
        out.push_str(name);
        out.push('\n');
    };
    let emit = |out: &mut String, key: &str, v: &Value| {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(&v.to_string());
        out.push('\n');
    };
    let walk = |out: &mut String, prefix: &str, v: &Value| {
        let obj = v.as_object().expect("config tables are objects");
        for (k, val) in obj {
            emit(out, &format!("{prefix}.{k}"), val);
        }
    };
    let top = v.as_object().unwrap();
    section(&mut out, "corpus and request stream");
    for k in ["corpus_seed", "per_category", "forget_fraction", "request_size", "stream_seed"] {
        emit(&mut out, k, &top[k]);
    }
    section(&mut out, "model and supervised training");
    walk(&mut out, "model", &top["model"]);
    emit(&mut out, "init_seed", &top["init_seed"]);
    walk(&mut out, "train", &top["train"]);
    section(&mut out, "redundancy filter");
    walk(&mut out, "filter", &top["filter"]);
    section(&mut out, "importance-based method selection");
    walk(&mut out, "method_map", &top["method_map"]);
    section(&mut out, "layer attribution (k = null means a quarter of the blocks)");
    emit(&mut out, "k", &top["k"]);
    section(&mut out, "unlearning objective");
    walk(&mut out, "objective", &top["objective"]);
    for k in ["steps_per_request", "retain_batch", "unlearn_lr"] {
        emit(&mut out, k, &top[k]);
    }
    section(&mut out, "evaluation and baseline");
    for k in ["checkpoint_interval", "baseline"] {
        emit(&mut out, k, &top[k]);
    }
    section(&mut out, "ablations (all off = the full pipeline)");
    walk(&mut out, "ablations", &top["ablations"]);
    emit(&mut out, "run_seed", &top["run_seed"]);
    out
}
